//! `evgust` command line: train, predict, evaluate, explain, spatial, tune.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Settings;
use evgust::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "evgust", version, about = "Evidential wind-gust post-processing with uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML file with the same keys as the long flags (underscored)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Train a model on a station CSV and write the artifact, epoch log and validation report
    Train,
    /// Predict with uncertainty on a station or grid CSV
    Predict,
    /// Score a predictions file against observations
    Evaluate,
    /// Permutation importance and partial dependence
    Explain,
    /// Spatial-maximum tracks and their alignment on gridded predictions
    Spatial,
    /// Multi-objective random search over hyperparameters
    Tune,
}

fn run(cli: Cli) -> Result<()> {
    let settings = match &cli.config {
        Some(path) => cli.settings.over(Settings::from_file(path)?),
        None => cli.settings,
    };
    if let Some(n) = settings.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train => commands::train(&settings),
        Command::Predict => commands::predict(&settings),
        Command::Evaluate => commands::evaluate_cmd(&settings),
        Command::Explain => commands::explain(&settings),
        Command::Spatial => commands::spatial(&settings),
        Command::Tune => commands::tune(&settings),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
