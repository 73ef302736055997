use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rainbow_lab::agent::Ablation;
use rainbow_lab::harness::ablate::{ablate, thread_count, SUMMARY_FILE};
use rainbow_lab::harness::checkpoint::Checkpoint;
use rainbow_lab::harness::config::RunConfig;
use rainbow_lab::harness::report::{self, CURVES_FILE};
use rainbow_lab::harness::{evaluate_checkpoint, train_to_dir, TrainOptions, METRICS_FILE};
use rainbow_lab::Error;

/// Train, evaluate and ablate the Rainbow agent on small exact MDPs.
#[derive(Debug, Parser)]
#[command(name = "rainbow-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one agent per configured environment.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `harness.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// `section.key=value`, applied after the file; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Overrides `harness.output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Stop at this env step and leave a resumable checkpoint.
        #[arg(long)]
        stop_at: Option<u64>,
        /// Continue from a checkpoint written under the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint greedily and print JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Environments to score on; defaults to those the checkpoint was trained on.
        #[arg(long = "env")]
        envs: Vec<String>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Full agent plus one run per removed component, per seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated component names, or `all`.
        #[arg(long, default_value = "all")]
        components: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Collect learning curves and final scores from run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Trailing moving-average window, in evaluation points.
        #[arg(long, default_value_t = 1)]
        window: usize,
        /// Where to write the long-format curves.
        #[arg(long, default_value = CURVES_FILE)]
        curves: PathBuf,
    },
}

fn parse_components(s: &str) -> rainbow_lab::Result<Vec<Ablation>> {
    match s.trim() {
        "all" => Ok(Ablation::ALL.to_vec()),
        "" | "none" => Ok(Vec::new()),
        list => list.split(',').map(|c| c.trim().parse()).collect(),
    }
}

fn run(cli: Cli) -> rainbow_lab::Result<()> {
    match cli.command {
        Command::Train { config, seed, mut overrides, out, force, stop_at, resume } => {
            if let Some(seed) = seed {
                overrides.push(format!("harness.seed={seed}"));
            }
            let mut config = RunConfig::load(&config, &overrides)?;
            if let Some(out) = out {
                config.harness.output_dir = out.display().to_string();
            }
            let dir = PathBuf::from(&config.harness.output_dir);
            let run = train_to_dir(config, &TrainOptions { force, stop_at, resume })?;
            let last = run.metrics()?.rows.last().map(|r| r.median_normalized).unwrap_or(f64::NAN);
            eprintln!(
                "step {}: median normalized {last:.2}; wrote {}",
                run.env_steps(),
                dir.join(METRICS_FILE).display()
            );
        }
        Command::Evaluate { checkpoint, envs, episodes, seed } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let score = evaluate_checkpoint(&ck, &envs, episodes, seed)?;
            println!("{}", score.to_json());
        }
        Command::Ablate { config, components, seeds, overrides, out, force } => {
            let components = parse_components(&components)?;
            let mut config = RunConfig::load(&config, &overrides)?;
            if let Some(out) = out {
                config.harness.output_dir = out.display().to_string();
            }
            let root = PathBuf::from(&config.harness.output_dir);
            let rows = ablate(&config, &components, &seeds, &root, thread_count()?, force)?;
            eprintln!("{} runs; wrote {}", rows.len(), root.join(SUMMARY_FILE).display());
        }
        Command::Report { runs, window, curves } => {
            let report = report::build(&runs, window)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            report.write_curves(&curves)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Usage(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
