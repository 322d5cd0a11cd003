//! Command-line driver for VE diffusion experiments.
//!
//! Exit codes: 0 success (training reached `eps_train`), 2 training stopped at
//! `max_steps`, 3 training diverged after all step-size halvings, 1 any error.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vesde::training::StopReason;

use crate::commands::RunContext;
use crate::config::LoadedConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] vesde::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("threads: {0}")]
    Threads(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Debug, Parser)]
#[command(name = "vesde", version, about = "Variance-exploding diffusion laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Train the score network by gradient descent.
    Train,
    /// Run the reverse-time sampler with an oracle or checkpoint score.
    Sample,
    /// Exact Gaussian KL and error terms over a list of step counts.
    Oracle,
    /// Polynomial vs exponential schedules at shared endpoints.
    CompareSchedules,
    /// Residual norm of a network across noise levels.
    ProbeBell,
}

const EXIT_MAX_STEPS: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let loaded = LoadedConfig::load(&path)?;
    let seed = cli.seed.unwrap_or(loaded.config.seed);
    let out = cli.out.unwrap_or_else(|| loaded.resolve(&loaded.config.output));
    let threads = cli.threads.unwrap_or(loaded.config.threads);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let ctx = RunContext {
        loaded: &loaded,
        seed,
        out: &out,
    };
    pool.install(|| match cli.command {
        Command::Train => commands::train(&ctx).map(|reason| match reason {
            StopReason::Converged => ExitCode::SUCCESS,
            StopReason::MaxSteps => ExitCode::from(EXIT_MAX_STEPS),
            StopReason::Diverged => {
                eprintln!("error: training diverged at every step size tried");
                ExitCode::from(EXIT_DIVERGED)
            }
        }),
        Command::Sample => commands::sample_cmd(&ctx).map(|_| ExitCode::SUCCESS),
        Command::Oracle => commands::oracle(&ctx).map(|_| ExitCode::SUCCESS),
        Command::CompareSchedules => commands::compare(&ctx).map(|_| ExitCode::SUCCESS),
        Command::ProbeBell => commands::probe(&ctx).map(|_| ExitCode::SUCCESS),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
