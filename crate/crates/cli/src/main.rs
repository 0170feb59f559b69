use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::info;

use qem_core::experiment::{self, compare, evaluate_feasibility, load_summary, ExperimentConfig, FeasibilityConfig};
use qem_core::QemError;

/// Exit status for configuration and validation failures.
const EXIT_USAGE: u8 = 2;
/// Exit status when `compare --max-rel-drift` is exceeded.
const EXIT_DRIFT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "qem",
    version,
    about = "Run and compare oracle-call electron microscopy simulations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Overrides the config's `output_dir`.
        #[arg(long)]
        outdir: Option<PathBuf>,
    },
    /// Report per-metric drift between two runs (directories or manifest paths).
    Compare {
        baseline: PathBuf,
        candidate: PathBuf,
        /// Exit with status 3 if any metric's relative drift exceeds this.
        #[arg(long)]
        max_rel_drift: Option<f64>,
    },
    /// Evaluate deflection and back-action for a circuit config.
    Feasibility { config: PathBuf },
}

fn threads() -> anyhow::Result<Option<usize>> {
    match std::env::var("QEM_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("QEM_THREADS={v:?} is not a count"))?;
            anyhow::ensure!(n > 0, "QEM_THREADS must be at least 1");
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn execute(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Run { config, outdir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(dir) = outdir {
                cfg.output_dir = dir;
            }
            if let Some(n) = threads()? {
                rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
            }
            info!("running {} with seed {}", cfg.scenario.name(), cfg.seed);
            let manifest = experiment::run(&cfg)?;
            let dir = cfg.run_dir();
            let summary = load_summary(&dir)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            eprintln!(
                "wrote {} files to {} in {:.2}s",
                manifest.files.len(),
                dir.display(),
                manifest.wall_time_s
            );
            Ok(0)
        }
        Command::Compare {
            baseline,
            candidate,
            max_rel_drift,
        } => {
            let report = compare(&load_summary(&baseline)?, &load_summary(&candidate)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            let exceeded = max_rel_drift.is_some_and(|tol| report.metrics.iter().any(|m| m.rel_diff > tol));
            Ok(if exceeded { EXIT_DRIFT } else { 0 })
        }
        Command::Feasibility { config } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg: FeasibilityConfig =
                serde_json::from_str(&text).map_err(|e| QemError::Config(format!("{}: {e}", config.display())))?;
            println!("{}", serde_json::to_string_pretty(&evaluate_feasibility(&cfg)?)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            let usage = matches!(
                err.downcast_ref::<QemError>(),
                Some(QemError::Config(_) | QemError::InvalidArgument(_) | QemError::DataRequired { .. })
            );
            ExitCode::from(if usage { EXIT_USAGE } else { 1 })
        }
    }
}
