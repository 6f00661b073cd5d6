mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "circuitscope", version, about = "Circuit analysis for decoder-only transformers")]
struct Cli {
    /// JSON experiment config; flags override its fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Accuracy and zero-rank rate at END
    Eval(#[command(flatten)] ExperimentConfig),
    /// Path-patching sweep of every head into a receiver
    Patch(#[command(flatten)] ExperimentConfig),
    /// Information-flow graphs and head activation frequencies
    Flow(#[command(flatten)] ExperimentConfig),
    /// Zero heads (--heads) and MLPs (--layers), then re-evaluate
    Ablate(#[command(flatten)] ExperimentConfig),
    /// Top promoted tokens per site at END
    Lens(#[command(flatten)] ExperimentConfig),
    /// Correlation and overlap of two frequency matrices
    Compare {
        freq_a: PathBuf,
        freq_b: PathBuf,
        #[command(flatten)]
        cfg: ExperimentConfig,
    },
    /// Previous-token, duplicate, induction and copy scores per head
    Scores {
        /// Random sequence length (half length for the repeated protocols)
        #[arg(long, default_value_t = 50)]
        seq_len: usize,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[command(flatten)]
        cfg: ExperimentConfig,
    },
    /// Property suite on built-in tiny random models
    Selftest {
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn resolve(file: &Option<PathBuf>, flags: &ExperimentConfig) -> Result<ExperimentConfig> {
    let base = match file {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.merged(flags).resolved();
    set_workers(cfg.workers)?;
    Ok(cfg)
}

fn set_workers(workers: Option<usize>) -> Result<()> {
    if let Some(n) = workers {
        anyhow::ensure!(n >= 1, "--workers must be at least 1");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let file = &cli.config;
    match cli.command {
        Command::Eval(f) => commands::eval(&resolve(file, &f)?)?,
        Command::Patch(f) => commands::patch(&resolve(file, &f)?)?,
        Command::Flow(f) => commands::flow(&resolve(file, &f)?)?,
        Command::Ablate(f) => commands::ablate(&resolve(file, &f)?)?,
        Command::Lens(f) => commands::lens(&resolve(file, &f)?)?,
        Command::Compare { freq_a, freq_b, cfg } => commands::compare(&resolve(file, &cfg)?, &freq_a, &freq_b)?,
        Command::Scores { seq_len, samples, cfg } => commands::scores(&resolve(file, &cfg)?, seq_len, samples)?,
        Command::Selftest { workers } => {
            set_workers(workers)?;
            return Ok(commands::selftest_cmd());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
