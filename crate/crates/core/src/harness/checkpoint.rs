//! Binary checkpoints holding the complete trainer state.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"RBW1"
//! u64 manifest length, manifest (UTF-8 TOML)
//! u64 tensor count
//! per tensor: u32 name length, name, u32 ndim, u64 × ndim dims,
//!             u64 payload bytes, f64 × n payload (row-major)
//! 32-byte SHA-256 of everything above
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{EvalPoint, EvalSchedule, Trainer, ValueHead};
use crate::envs::{EnvSnapshot, EnvSpec};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::network::{Architecture, NamedTensor, NetworkParams};
use crate::replay::{PendingStep, Transition};
use crate::rng::RngState;

pub const MAGIC: &[u8; 4] = b"RBW1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    /// The resolved run config.
    pub config: String,
    pub runs: Vec<RunManifest>,
}

/// Per-environment counters and stream positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub env: String,
    pub seed: u64,
    pub architecture: Architecture,
    pub env_steps: u64,
    pub learn_steps: u64,
    pub optimizer_steps: u64,
    pub loss_count: u64,
    pub replay_next: usize,
    pub nstep_terminal: bool,
    pub env_state: EnvSnapshot,
    pub action_rng: RngState,
    pub noise_rng: RngState,
    pub replay_rng: RngState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<NamedTensor>,
}

fn tensor(name: String, shape: Vec<usize>, data: Vec<f64>) -> NamedTensor {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    NamedTensor { name, shape, data }
}

fn rows(name: String, width: usize, vs: impl Iterator<Item = Vec<f64>>) -> NamedTensor {
    let data: Vec<f64> = vs.flatten().collect();
    let n = data.len().checked_div(width).unwrap_or(0);
    tensor(name, vec![n, width], data)
}

fn column(name: String, vs: impl Iterator<Item = f64>) -> NamedTensor {
    let data: Vec<f64> = vs.collect();
    tensor(name, vec![data.len()], data)
}

impl Checkpoint {
    /// Captures every trainer of a run.
    pub fn capture(config: &RunConfig, trainers: &[Trainer]) -> Self {
        let mut runs = Vec::new();
        let mut tensors = Vec::new();
        for (k, t) in trainers.iter().enumerate() {
            let a = &t.agent;
            let p = format!("run{k}.");
            let d = t.spec.observation_dim;
            runs.push(RunManifest {
                env: t.spec.name(),
                seed: t.seed,
                architecture: a.online.arch.clone(),
                env_steps: a.env_steps,
                learn_steps: a.learn_steps,
                optimizer_steps: a.optimizer.step,
                loss_count: t.loss_count,
                replay_next: a.buffer.next_slot(),
                nstep_terminal: a.nstep.awaiting_flush(),
                env_state: t.env.snapshot(),
                action_rng: RngState::capture(&a.action_rng),
                noise_rng: RngState::capture(&a.noise_rng),
                replay_rng: RngState::capture(&a.replay_rng),
            });
            tensors.extend(a.online.named_tensors(&format!("{p}online.")));
            tensors.extend(a.target.named_tensors(&format!("{p}target.")));
            for (j, (m, v)) in a.optimizer.m.iter().zip(&a.optimizer.v).enumerate() {
                tensors.push(column(format!("{p}adam.m.{j}"), m.iter().copied()));
                tensors.push(column(format!("{p}adam.v.{j}"), v.iter().copied()));
            }
            let tr = a.buffer.transitions();
            tensors.push(rows(format!("{p}replay.state"), d, tr.iter().map(|x| x.state.clone())));
            tensors.push(rows(format!("{p}replay.bootstrap_state"), d, tr.iter().map(|x| x.bootstrap_state.clone())));
            tensors.push(column(format!("{p}replay.action"), tr.iter().map(|x| x.action as f64)));
            tensors.push(column(format!("{p}replay.return"), tr.iter().map(|x| x.n_step_return)));
            tensors.push(column(format!("{p}replay.discount"), tr.iter().map(|x| x.n_step_discount)));
            tensors.push(column(format!("{p}replay.steps"), tr.iter().map(|x| x.steps as f64)));
            tensors.push(column(format!("{p}replay.priority"), (0..tr.len()).map(|i| a.buffer.priority(i))));
            let pending: Vec<&PendingStep> = a.nstep.pending().collect();
            tensors.push(rows(format!("{p}nstep.state"), d, pending.iter().map(|s| s.state.clone())));
            tensors.push(rows(format!("{p}nstep.next_state"), d, pending.iter().map(|s| s.next_state.clone())));
            tensors.push(column(format!("{p}nstep.action"), pending.iter().map(|s| s.action as f64)));
            tensors.push(column(format!("{p}nstep.reward"), pending.iter().map(|s| s.reward)));
            tensors.push(column(format!("{p}nstep.discount"), pending.iter().map(|s| s.discount)));
            tensors.push(rows(
                format!("{p}log"),
                5,
                t.log.iter().map(|e| {
                    vec![e.env_step as f64, e.mean_return, e.normalized, e.batch_mean_loss, e.learn_steps as f64]
                }),
            ));
            tensors.push(column(format!("{p}scalars"), [t.loss_sum, a.buffer.max_priority_seen()].into_iter()));
        }
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                config_hash: config.hash(),
                config: config.to_toml(),
                runs,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest =
            toml::to_string(&self.manifest).map_err(|e| Error::Checkpoint(format!("cannot encode manifest: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&((t.data.len() * 8) as u64).to_le_bytes());
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Decodes and verifies: magic, format version, tensor sizes, digest.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
        }
        let len = r.u64("manifest length")? as usize;
        let text = std::str::from_utf8(r.take(len, "manifest")?)
            .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
        let raw: toml::Table = text.parse().map_err(|e| Error::Checkpoint(format!("manifest does not parse: {e}")))?;
        match raw.get("format_version").and_then(toml::Value::as_integer) {
            Some(v) if v == FORMAT_VERSION as i64 => {}
            Some(v) => {
                return Err(Error::Incompatible(format!(
                    "format version {v}, this build reads version {FORMAT_VERSION}"
                )))
            }
            None => return Err(Error::Incompatible("manifest has no format_version".into())),
        }
        let manifest: Manifest =
            toml::from_str(text).map_err(|e| Error::Checkpoint(format!("manifest is malformed: {}", e.message())))?;
        let count = r.u64("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u32("tensor rank")? as usize;
            let shape = (0..ndim).map(|_| r.u64("tensor dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let expected = shape.iter().product::<usize>() * 8;
            let actual = r.u64("payload length")? as usize;
            if actual != expected {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` declares {actual} payload bytes, shape {shape:?} needs {expected}"
                )));
            }
            let payload = r.take(actual, &format!("payload of `{name}`"))?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let body = r.pos;
        let stored = r.take(32, "digest")?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after digest", bytes.len() - r.pos)));
        }
        if Sha256::digest(&bytes[..body]).as_slice() != stored {
            return Err(Error::Checkpoint("digest mismatch: checkpoint was modified or corrupted".into()));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// The run config this checkpoint was written under.
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.manifest.config, "checkpoint manifest", &[])
    }

    fn index(&self) -> HashMap<&str, &NamedTensor> {
        self.tensors.iter().map(|t| (t.name.as_str(), t)).collect()
    }

    /// Rebuilds the trainers, refusing a checkpoint taken under another
    /// config.
    pub fn restore(&self, config: &RunConfig) -> Result<Vec<Trainer>> {
        if self.manifest.config_hash != config.hash() {
            return Err(Error::Incompatible(format!(
                "checkpoint was written for config {}, current config is {}",
                self.manifest.config_hash,
                config.hash()
            )));
        }
        let specs = config.env_specs()?;
        if specs.len() != self.manifest.runs.len() {
            return Err(Error::Incompatible("environment count differs from the checkpoint".into()));
        }
        let index = self.index();
        let get = |name: String| -> Result<&NamedTensor> {
            index.get(name.as_str()).copied().ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let schedule = EvalSchedule { period: config.harness.eval_period, episodes: config.harness.episodes_per_eval };
        let mut out = Vec::new();
        for (k, (spec, m)) in specs.iter().zip(&self.manifest.runs).enumerate() {
            if spec.name() != m.env {
                return Err(Error::Incompatible(format!("run {k} is {}, config names {}", m.env, spec.name())));
            }
            let p = format!("run{k}.");
            let mut t = Trainer::unevaluated(&config.rainbow, spec, schedule, m.seed)?;
            let a = &mut t.agent;
            if a.online.arch != m.architecture {
                return Err(Error::Incompatible(format!("architecture of run {k} differs from the config")));
            }
            a.online.load_tensors(&format!("{p}online."), |n| index.get(n).copied())?;
            a.target.load_tensors(&format!("{p}target."), |n| index.get(n).copied())?;
            a.optimizer.step = m.optimizer_steps;
            for j in 0..a.optimizer.m.len() {
                for (dst, key) in [(&mut a.optimizer.m[j], "m"), (&mut a.optimizer.v[j], "v")] {
                    let src = get(format!("{p}adam.{key}.{j}"))?;
                    if src.data.len() != dst.len() {
                        return Err(Error::Checkpoint(format!(
                            "tensor `{}` has {} values, optimizer expects {}",
                            src.name,
                            src.data.len(),
                            dst.len()
                        )));
                    }
                    dst.copy_from_slice(&src.data);
                }
            }

            let d = spec.observation_dim;
            let states = get(format!("{p}replay.state"))?;
            let boots = get(format!("{p}replay.bootstrap_state"))?;
            let actions = get(format!("{p}replay.action"))?;
            let returns = get(format!("{p}replay.return"))?;
            let discounts = get(format!("{p}replay.discount"))?;
            let steps = get(format!("{p}replay.steps"))?;
            let priorities = get(format!("{p}replay.priority"))?;
            let n = actions.data.len();
            for x in [returns, discounts, steps, priorities] {
                if x.data.len() != n {
                    return Err(Error::Checkpoint(format!("tensor `{}` should hold {n} values", x.name)));
                }
            }
            for x in [states, boots] {
                if x.shape != [n, d] {
                    return Err(Error::Checkpoint(format!("tensor `{}` should have shape [{n}, {d}]", x.name)));
                }
            }
            let storage = (0..n)
                .map(|i| Transition {
                    state: states.data[i * d..(i + 1) * d].to_vec(),
                    action: actions.data[i] as usize,
                    n_step_return: returns.data[i],
                    n_step_discount: discounts.data[i],
                    bootstrap_state: boots.data[i * d..(i + 1) * d].to_vec(),
                    steps: steps.data[i] as usize,
                })
                .collect();
            let scalars = get(format!("{p}scalars"))?;
            if scalars.data.len() != 2 {
                return Err(Error::Checkpoint(format!("tensor `{}` should hold 2 values", scalars.name)));
            }
            a.buffer.restore(storage, &priorities.data, m.replay_next, scalars.data[1])?;

            let ns = get(format!("{p}nstep.state"))?;
            let nn = get(format!("{p}nstep.next_state"))?;
            let na = get(format!("{p}nstep.action"))?;
            let nr = get(format!("{p}nstep.reward"))?;
            let nd = get(format!("{p}nstep.discount"))?;
            let k_pending = na.data.len();
            if ns.shape != [k_pending, d]
                || nn.shape != [k_pending, d]
                || nr.data.len() != k_pending
                || nd.data.len() != k_pending
            {
                return Err(Error::Checkpoint(format!("n-step window tensors of run {k} disagree in length")));
            }
            let pending = (0..k_pending)
                .map(|i| PendingStep {
                    state: ns.data[i * d..(i + 1) * d].to_vec(),
                    action: na.data[i] as usize,
                    reward: nr.data[i],
                    discount: nd.data[i],
                    next_state: nn.data[i * d..(i + 1) * d].to_vec(),
                })
                .collect();
            a.nstep.restore(pending, m.nstep_terminal);

            a.env_steps = m.env_steps;
            a.learn_steps = m.learn_steps;
            a.action_rng = m.action_rng.restore()?;
            a.noise_rng = m.noise_rng.restore()?;
            a.replay_rng = m.replay_rng.restore()?;
            t.env.restore(&m.env_state)?;
            t.obs = t.env.observation();
            t.loss_sum = scalars.data[0];
            t.loss_count = m.loss_count;
            let log = get(format!("{p}log"))?;
            t.log = log
                .data
                .chunks_exact(5)
                .map(|r| EvalPoint {
                    env_step: r[0] as u64,
                    mean_return: r[1],
                    normalized: r[2],
                    batch_mean_loss: r[3],
                    learn_steps: r[4] as u64,
                })
                .collect();
            out.push(t);
        }
        Ok(out)
    }

    /// Online network of run `k`, shaped for `env`. A network that does not
    /// fit the environment fails naming the first mismatched tensor.
    pub fn online_network(&self, k: usize, env: &EnvSpec) -> Result<NetworkParams> {
        let m =
            self.manifest.runs.get(k).ok_or_else(|| {
                Error::Usage(format!("checkpoint holds {} runs, no run {k}", self.manifest.runs.len()))
            })?;
        let mut arch = m.architecture.clone();
        arch.observation_dim = env.observation_dim;
        arch.n_actions = env.action_count;
        let mut params = NetworkParams::init(arch, &mut crate::rng::stream(0, crate::rng::Stream::Params))?;
        let index = self.index();
        params.load_tensors(&format!("run{k}.online."), |n| index.get(n).copied())?;
        Ok(params)
    }

    pub fn value_head(&self) -> Result<ValueHead> {
        Ok(ValueHead { support: self.config()?.rainbow.support()? })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated while reading {what}: needed {n} bytes, {} remain",
                self.bytes.len() - self.pos
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short_run() -> (RunConfig, Vec<Trainer>) {
        let mut c = RunConfig::default();
        c.harness.envs = vec!["chain(4)".into()];
        c.harness.eval_period = 50;
        c.harness.episodes_per_eval = 1;
        c.rainbow.network.hidden = vec![8];
        c.rainbow.distributional.n_atoms = 5;
        c.rainbow.agent.min_history = 20;
        c.rainbow.agent.batch_size = 4;
        c.rainbow.agent.training_budget = 120;
        let specs = c.env_specs().unwrap();
        let schedule = EvalSchedule { period: 50, episodes: 1 };
        let mut t = Trainer::new(&c.rainbow, &specs[0], schedule, 5).unwrap();
        t.run_until(70).unwrap();
        (c, vec![t])
    }

    #[test]
    fn bytes_round_trip() {
        let (c, ts) = short_run();
        let ck = Checkpoint::capture(&c, &ts);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.manifest, ck.manifest);
        assert_eq!(back.tensors.len(), ck.tensors.len());
        for (a, b) in back.tensors.iter().zip(&ck.tensors) {
            assert_eq!((&a.name, &a.shape), (&b.name, &b.shape));
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.name);
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn restored_trainer_continues_identically() {
        let (c, ts) = short_run();
        let ck = Checkpoint::from_bytes(&Checkpoint::capture(&c, &ts).to_bytes().unwrap()).unwrap();
        let mut resumed = ck.restore(&c).unwrap().remove(0);
        let mut unbroken = ts.into_iter().next().unwrap();
        resumed.run().unwrap();
        unbroken.run().unwrap();
        // Debug formatting compares the NaN losses too.
        assert_eq!(format!("{:?}", resumed.log), format!("{:?}", unbroken.log));
        assert_eq!(resumed.agent.online, unbroken.agent.online);
    }

    #[test]
    fn tampering_is_detected() {
        let (c, ts) = short_run();
        let bytes = Checkpoint::capture(&c, &ts).to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let at = text.find("config_hash = \"").unwrap() + 15;
        let mut edited = bytes.clone();
        edited[at] = if edited[at] == b'0' { b'1' } else { b'0' };
        let err = Checkpoint::from_bytes(&edited).unwrap_err().to_string();
        assert!(err.contains("digest"), "{err}");

        let mut other = c.clone();
        other.harness.seed = 99;
        let err = Checkpoint::from_bytes(&bytes).unwrap().restore(&other).unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)));
    }

    #[test]
    fn version_mismatch_is_incompatible() {
        let (c, ts) = short_run();
        let mut ck = Checkpoint::capture(&c, &ts);
        ck.manifest.format_version = 7;
        let err = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)), "{err}");
    }

    #[test]
    fn bad_payload_length_names_tensor() {
        let (c, ts) = short_run();
        let ck = Checkpoint::capture(&c, &ts);
        let mut bytes = ck.to_bytes().unwrap();
        let name = b"run0.online.encoder.0.bias";
        let at = bytes.windows(name.len()).position(|w| w == name).unwrap() + name.len();
        // rank (u32) and one dim (u64) precede the payload length
        let len_at = at + 4 + 8;
        bytes[len_at] = bytes[len_at].wrapping_add(8);
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("run0.online.encoder.0.bias") && err.contains("72") && err.contains("64"), "{err}");
    }

    #[test]
    fn network_for_wrong_env_names_tensor() {
        let (c, ts) = short_run();
        let ck = Checkpoint::capture(&c, &ts);
        let other = EnvSpec::parse("chain(6)", 0.99).unwrap();
        let err = ck.online_network(0, &other).unwrap_err().to_string();
        assert!(err.contains("run0.online.encoder.0.weight"), "{err}");
    }
}
