//! Command-line front end for the causal explanation engine.

use clap::{Args, Parser, Subcommand};
use cxplain::config::{load_config, RunConfig};
use cxplain::error::{Error, Result};
use cxplain::runner;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "cxplain",
    version,
    about = "Learned per-feature importance for black-box models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to the run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration field, as dotted.path=json_value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker-thread cap. Falls back to the configuration, then the
    /// CXPLAIN_THREADS environment variable.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Precompute per-group importance targets by masked re-evaluation.
    Targets(ConfigArgs),
    /// Train the explainer on precomputed targets.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Targets file to train on (defaults to omega.csv in the run directory).
        #[arg(long)]
        omega: Option<PathBuf>,
    },
    /// Attribute rows of a feature CSV with a saved explainer.
    Explain {
        /// Saved explainer model (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Feature CSV to attribute (header row, one input per line).
        #[arg(long)]
        input: PathBuf,
        /// Destination CSV for the attributions.
        #[arg(long)]
        output: PathBuf,
        /// Worker-thread cap.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Train a bootstrap ensemble and write confidence intervals.
    Ensemble {
        #[command(flatten)]
        common: ConfigArgs,
        /// Targets file to train on (defaults to omega.csv in the run directory).
        #[arg(long)]
        omega: Option<PathBuf>,
    },
    /// Run the evaluation benchmark and write the report files.
    Benchmark(ConfigArgs),
}

fn load(common: &ConfigArgs) -> Result<RunConfig> {
    load_config(&common.config, &common.overrides)
}

/// Runs `f` inside a rayon pool sized by the resolved thread cap, or in
/// the default pool when no cap is set.
fn with_threads<T>(
    flag: Option<usize>,
    config_threads: Option<usize>,
    f: impl FnOnce() -> Result<T> + Send,
) -> Result<T>
where
    T: Send,
{
    match runner::resolve_threads(flag, config_threads)? {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(f)
        }
        None => f(),
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Targets(common) => {
            let cfg = load(&common)?;
            with_threads(common.threads, cfg.threads, || runner::cmd_targets(&cfg))
        }
        Command::Train { common, omega } => {
            let cfg = load(&common)?;
            with_threads(common.threads, cfg.threads, || {
                runner::cmd_train(&cfg, omega.as_deref())
            })
        }
        Command::Explain {
            model,
            input,
            output,
            threads,
        } => with_threads(threads, None, || {
            runner::cmd_explain(&model, &input, &output)
        }),
        Command::Ensemble { common, omega } => {
            let cfg = load(&common)?;
            with_threads(common.threads, cfg.threads, || {
                runner::cmd_ensemble(&cfg, omega.as_deref())
            })
        }
        Command::Benchmark(common) => {
            let cfg = load(&common)?;
            with_threads(common.threads, cfg.threads, || runner::cmd_benchmark(&cfg))
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
