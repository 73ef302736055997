//! Run configuration: a TOML file with one table per module, plus
//! `--set section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{AgentConfig, DistributionalConfig, NetworkConfig, RainbowConfig, ReplayConfig};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};

/// `[harness]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub envs: Vec<String>,
    /// Environment steps between evaluations.
    pub eval_period: u64,
    pub episodes_per_eval: usize,
    pub seed: u64,
    pub output_dir: String,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            envs: vec!["chain(10)".into()],
            eval_period: 1_000,
            episodes_per_eval: 5,
            seed: 0,
            output_dir: "runs/default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileLayout {
    harness: HarnessConfig,
    agent: AgentConfig,
    replay: ReplayConfig,
    network: NetworkConfig,
    distributional: DistributionalConfig,
}

/// Everything one `train` invocation needs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub harness: HarnessConfig,
    pub rainbow: RainbowConfig,
}

impl RunConfig {
    /// Parses config text. `origin` prefixes error messages (usually the
    /// file name); semantic errors point at the offending line.
    pub fn parse(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {}", e.to_string().trim_end())))?;
        // Deserializing the text itself first keeps line numbers in type errors.
        toml::from_str::<FileLayout>(text)
            .map_err(|e| Error::Config(format!("{origin}: {}", e.to_string().trim_end())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let layout: FileLayout = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override: {}", e.message())))?;
        let config = Self::from_layout(layout);
        if let Err((key, msg)) = config.check_keys() {
            let place = if overrides.iter().any(|o| o.split('=').next() == Some(key.as_str())) {
                "--set".to_string()
            } else {
                match locate_key(text, &key) {
                    Some(line) => format!("{origin}:{line}"),
                    None => origin.to_string(),
                }
            };
            return Err(Error::Config(format!("{place}: {key}: {msg}")));
        }
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string(), overrides)
    }

    fn from_layout(l: FileLayout) -> Self {
        Self {
            harness: l.harness,
            rainbow: RainbowConfig {
                agent: l.agent,
                replay: l.replay,
                network: l.network,
                distributional: l.distributional,
            },
        }
    }

    fn layout(&self) -> FileLayout {
        let r = self.rainbow.clone();
        FileLayout {
            harness: self.harness.clone(),
            agent: r.agent,
            replay: r.replay,
            network: r.network,
            distributional: r.distributional,
        }
    }

    fn check_keys(&self) -> Result<(), (String, String)> {
        let h = &self.harness;
        if h.envs.is_empty() {
            return Err(("harness.envs".into(), "at least one environment is required".into()));
        }
        for name in &h.envs {
            EnvSpec::parse(name, self.rainbow.agent.gamma).map_err(|e| ("harness.envs".to_string(), e.to_string()))?;
        }
        if h.seed > i64::MAX as u64 {
            return Err(("harness.seed".into(), format!("must not exceed {}", i64::MAX)));
        }
        if h.eval_period == 0 {
            return Err(("harness.eval_period".into(), "must be at least 1".into()));
        }
        if h.episodes_per_eval == 0 {
            return Err(("harness.episodes_per_eval".into(), "must be at least 1".into()));
        }
        self.rainbow.validate()
    }

    /// Re-checks after programmatic edits.
    pub fn check(&self) -> Result<()> {
        self.check_keys().map_err(|(k, m)| Error::Config(format!("{k}: {m}")))
    }

    pub fn env_specs(&self) -> Result<Vec<EnvSpec>> {
        self.harness.envs.iter().map(|n| EnvSpec::parse(n, self.rainbow.agent.gamma)).collect()
    }

    /// Every effective value, as written to `resolved.toml`.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.layout()).expect("config serializes")
    }

    /// Digest of the resolved config, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.harness.output_dir.clear();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }
}

/// Applies `section.key=value`; the value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) =
        spec.split_once('=').ok_or_else(|| Error::Config(format!("--set {spec}: expected section.key=value")))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| Error::Config(format!("--set {spec}: key must look like section.key")))?;
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let entry = table.entry(section.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(t) = entry else {
        return Err(Error::Config(format!("--set {spec}: `{section}` is not a section")));
    };
    t.insert(key.to_string(), value);
    Ok(())
}

/// 1-based line of `section.key` in TOML text, if written there.
pub fn locate_key(text: &str, dotted: &str) -> Option<usize> {
    let (section, key) = dotted.split_once('.')?;
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = header.trim().to_string();
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else { continue };
        let lhs = lhs.trim();
        if (current == section && lhs == key) || (current.is_empty() && lhs == dotted) {
            return Some(i + 1);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "[harness]\nenvs = [\"chain(5)\"]\nseed = 3\n\n[agent]\nn_step = 2\ngamma = 0.9\n";

    #[test]
    fn file_values_and_defaults() {
        let c = RunConfig::parse(SAMPLE, "x.toml", &[]).unwrap();
        assert_eq!(c.harness.seed, 3);
        assert_eq!(c.rainbow.agent.n_step, 2);
        assert_eq!(c.rainbow.replay, ReplayConfig::default());
    }

    #[test]
    fn override_beats_file() {
        let c = RunConfig::parse(SAMPLE, "x.toml", &["agent.n_step=1".into()]).unwrap();
        assert_eq!(c.rainbow.agent.n_step, 1);
        assert!(c.to_toml().contains("n_step = 1"));
        let c = RunConfig::parse(SAMPLE, "x.toml", &["harness.output_dir=out/a".into()]).unwrap();
        assert_eq!(c.harness.output_dir, "out/a");
    }

    #[test]
    fn resolved_round_trips() {
        let c = RunConfig::parse(SAMPLE, "x.toml", &["agent.ablation=[\"no_noisy\"]".into()]).unwrap();
        let again = RunConfig::parse(&c.to_toml(), "resolved.toml", &[]).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
    }

    #[test]
    fn semantic_errors_name_the_line() {
        let text = "[agent]\ngamma = 0.99\nn_step = 0\n";
        let err = RunConfig::parse(text, "bad.toml", &[]).unwrap_err().to_string();
        assert!(err.contains("bad.toml:3") && err.contains("agent.n_step"), "{err}");
        let err = RunConfig::parse(text, "bad.toml", &["agent.n_step=0".into()]).unwrap_err().to_string();
        assert!(err.contains("--set"), "{err}");
    }

    #[test]
    fn unknown_keys_and_envs_are_rejected() {
        let err = RunConfig::parse("[agent]\nnstep = 3\n", "u.toml", &[]).unwrap_err().to_string();
        assert!(err.contains("nstep") && err.contains("line 2"), "{err}");
        let err = RunConfig::parse("[harness]\nenvs = [\"maze(3)\"]\n", "u.toml", &[]).unwrap_err().to_string();
        assert!(err.contains("u.toml:2") && err.contains("harness.envs"), "{err}");
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.harness.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.harness.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
