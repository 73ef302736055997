//! Configuration, metrics files, checkpoints and the drivers behind the
//! command-line tool.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod report;

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::agent::{evaluate, EvalSchedule, SuiteScore, Trainer};
use crate::error::{Error, Result};
use checkpoint::Checkpoint;
use config::RunConfig;
use metrics::MetricsLog;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.rbw";
pub const RESOLVED_FILE: &str = "resolved.toml";

/// One agent per environment of the suite, stepped on a shared schedule.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub trainers: Vec<Trainer>,
}

impl Run {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.check()?;
        let schedule = EvalSchedule { period: config.harness.eval_period, episodes: config.harness.episodes_per_eval };
        let trainers = config
            .env_specs()?
            .iter()
            .map(|spec| Trainer::new(&config.rainbow, spec, schedule, config.harness.seed))
            .collect::<Result<_>>()?;
        Ok(Self { config, trainers })
    }

    pub fn resume(config: RunConfig, checkpoint: &Checkpoint) -> Result<Self> {
        let trainers = checkpoint.restore(&config)?;
        Ok(Self { config, trainers })
    }

    pub fn env_steps(&self) -> u64 {
        self.trainers[0].agent.env_steps
    }

    pub fn done(&self) -> bool {
        self.trainers.iter().all(Trainer::done)
    }

    pub fn run_until(&mut self, env_step: u64) -> Result<()> {
        for t in &mut self.trainers {
            t.run_until(env_step)?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(u64::MAX)
    }

    pub fn metrics(&self) -> Result<MetricsLog> {
        let logs: Vec<&[_]> = self.trainers.iter().map(|t| t.log.as_slice()).collect();
        MetricsLog::merge(self.config.harness.envs.clone(), &logs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, &self.trainers)
    }

    /// Writes `metrics.csv`, `checkpoint.rbw` and `resolved.toml`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.metrics()?.write(&dir.join(METRICS_FILE))?;
        self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        std::fs::write(dir.join(RESOLVED_FILE), self.config.to_toml())?;
        Ok(())
    }
}

/// Options of one `train` invocation.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub force: bool,
    /// Stop early at this env step, leaving a resumable checkpoint.
    pub stop_at: Option<u64>,
    pub resume: Option<PathBuf>,
}

/// Fails unless `dir` is absent or empty, or `force` is set.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.exists() && std::fs::read_dir(dir)?.next().is_some();
    if occupied && !force {
        return Err(Error::Usage(format!(
            "output directory {} already exists; pass --force to overwrite",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Trains (or resumes) a run and writes its outputs to the configured
/// directory.
pub fn train_to_dir(config: RunConfig, opts: &TrainOptions) -> Result<Run> {
    let dir = PathBuf::from(&config.harness.output_dir);
    let mut run = match &opts.resume {
        Some(path) => {
            std::fs::create_dir_all(&dir)?;
            Run::resume(config, &Checkpoint::load(path)?)?
        }
        None => {
            prepare_output_dir(&dir, opts.force)?;
            Run::new(config)?
        }
    };
    match opts.stop_at {
        Some(step) => run.run_until(step)?,
        None => run.run()?,
    }
    run.write_outputs(&dir)?;
    Ok(run)
}

/// JSON-friendly evaluation of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointScore {
    pub env_step: u64,
    #[serde(flatten)]
    pub score: SuiteScore,
}

impl CheckpointScore {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scores serialize")
    }
}

/// Evaluates the online network of a checkpoint. With `envs` empty, each
/// run is scored on its own environment; otherwise the first run's network
/// is scored on every named environment.
pub fn evaluate_checkpoint(ck: &Checkpoint, envs: &[String], episodes: usize, seed: u64) -> Result<CheckpointScore> {
    let config = ck.config()?;
    let gamma = config.rainbow.agent.gamma;
    let head = ck.value_head()?;
    let specs = if envs.is_empty() {
        config.env_specs()?
    } else {
        envs.iter().map(|n| crate::envs::EnvSpec::parse(n, gamma)).collect::<Result<_>>()?
    };
    let mut nets = Vec::new();
    for (k, spec) in specs.iter().enumerate() {
        let run = if envs.is_empty() { k } else { 0 };
        nets.push(ck.online_network(run, spec)?);
    }
    let suite: Vec<_> = specs.iter().zip(&nets).collect();
    let score = evaluate(&head, &suite, gamma, episodes, seed)?;
    let env_step = ck.manifest.runs.first().map_or(0, |r| r.env_steps);
    Ok(CheckpointScore { env_step, score })
}
