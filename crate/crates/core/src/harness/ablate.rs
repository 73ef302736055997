//! Full agent plus one run per removed component, per seed, with an
//! area-under-curve summary.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::agent::Ablation;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::metrics::MetricsLog;
use crate::harness::{prepare_output_dir, Run, METRICS_FILE};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const FULL_VARIANT: &str = "rainbow";
pub const THREADS_ENV: &str = "RAINBOW_LAB_THREADS";

/// One planned run.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub removed: Option<Ablation>,
    pub seed: u64,
}

impl Variant {
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(&self.name).join(format!("seed{}", self.seed))
    }
}

/// Full agent first, then each distinct component in the given order, for
/// every seed.
pub fn plan(components: &[Ablation], seeds: &[u64]) -> Vec<Variant> {
    let mut distinct: Vec<Ablation> = Vec::new();
    for &c in components {
        if !distinct.contains(&c) {
            distinct.push(c);
        }
    }
    let mut out = Vec::new();
    for removed in std::iter::once(None).chain(distinct.into_iter().map(Some)) {
        for &seed in seeds {
            let name = removed.map_or(FULL_VARIANT.to_string(), |a| a.name().to_string());
            out.push(Variant { name, removed, seed });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub seed: u64,
    pub auc: f64,
    /// AUC over the full agent's AUC for the same seed.
    pub relative_auc: f64,
    pub final_median: f64,
}

/// Worker count: `RAINBOW_LAB_THREADS` if set, else the machine's
/// parallelism.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs the plan under `root`, at most `threads` at a time, and writes
/// `summary.csv`.
pub fn ablate(
    base: &RunConfig,
    components: &[Ablation],
    seeds: &[u64],
    root: &Path,
    threads: usize,
    force: bool,
) -> Result<Vec<SummaryRow>> {
    if seeds.is_empty() {
        return Err(Error::Usage("at least one seed is required".into()));
    }
    prepare_output_dir(root, force)?;
    let variants = plan(components, seeds);
    let mut configs = Vec::with_capacity(variants.len());
    for v in &variants {
        let mut c = base.clone();
        c.harness.seed = v.seed;
        c.harness.output_dir = v.dir(root).display().to_string();
        c.rainbow.agent.ablation.extend(v.removed);
        c.check()?;
        configs.push(c);
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<MetricsLog>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, configs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(config) = configs.get(i) else { break };
                let outcome = (|| {
                    let dir = PathBuf::from(&config.harness.output_dir);
                    let mut run = Run::new(config.clone())?;
                    run.run()?;
                    run.write_outputs(&dir)?;
                    run.metrics()
                })();
                results.lock().unwrap()[i] = Some(outcome);
            });
        }
    });

    let logs = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every run executed"))
        .collect::<Result<Vec<_>>>()?;
    let rows = summarize(&variants, &logs);
    write_summary(&root.join(SUMMARY_FILE), &rows)?;
    Ok(rows)
}

pub fn summarize(variants: &[Variant], logs: &[MetricsLog]) -> Vec<SummaryRow> {
    let full_auc = |seed: u64| {
        variants
            .iter()
            .zip(logs)
            .find(|(v, _)| v.removed.is_none() && v.seed == seed)
            .map_or(f64::NAN, |(_, l)| l.auc())
    };
    variants
        .iter()
        .zip(logs)
        .map(|(v, log)| {
            let auc = log.auc();
            SummaryRow {
                variant: v.name.clone(),
                seed: v.seed,
                auc,
                relative_auc: auc / full_auc(v.seed),
                final_median: log.final_median(),
            }
        })
        .collect()
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "seed", "auc", "relative_auc", "final_median"])?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.seed.to_string(),
            r.auc.to_string(),
            r.relative_auc.to_string(),
            r.final_median.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = |k: usize| Error::Usage(format!("{}: bad value `{}`", path.display(), &rec[k]));
        if rec.len() != 5 {
            return Err(Error::Usage(format!("{}: expected 5 columns", path.display())));
        }
        out.push(SummaryRow {
            variant: rec[0].to_string(),
            seed: rec[1].parse().map_err(|_| bad(1))?,
            auc: rec[2].parse().map_err(|_| bad(2))?,
            relative_auc: rec[3].parse().map_err(|_| bad(3))?,
            final_median: rec[4].parse().map_err(|_| bad(4))?,
        });
    }
    Ok(out)
}

/// Metrics file of a planned run.
pub fn metrics_path(root: &Path, v: &Variant) -> PathBuf {
    v.dir(root).join(METRICS_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_counts() {
        assert_eq!(plan(&Ablation::ALL, &[0, 1, 2]).len(), 21);
        let only = plan(&[], &[4]);
        assert_eq!(only, vec![Variant { name: "rainbow".into(), removed: None, seed: 4 }]);
        assert_eq!(plan(&[Ablation::NoNoisy, Ablation::NoNoisy], &[0]).len(), 2);
    }

    #[test]
    fn small_ablation_writes_every_run() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.harness.envs = vec!["chain(4)".into()];
        c.harness.eval_period = 30;
        c.harness.episodes_per_eval = 1;
        c.rainbow.network.hidden = vec![8];
        c.rainbow.distributional.n_atoms = 5;
        c.rainbow.agent.min_history = 10;
        c.rainbow.agent.batch_size = 4;
        c.rainbow.agent.training_budget = 60;
        let root = tmp.path().join("abl");
        let rows = ablate(&c, &[Ablation::NoDouble, Ablation::NoDistributional], &[0, 1], &root, 2, false).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(read_summary(&root.join(SUMMARY_FILE)).unwrap(), rows);
        for v in plan(&[Ablation::NoDouble, Ablation::NoDistributional], &[0, 1]) {
            assert!(metrics_path(&root, &v).exists());
        }
        assert!(rows.iter().filter(|r| r.variant == "rainbow").all(|r| r.relative_auc == 1.0 || r.auc == 0.0));
    }
}
