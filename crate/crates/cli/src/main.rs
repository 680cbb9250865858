//! `canard`: simulation, fold analysis, control runs and parameter sweeps
//! driven by JSON config files.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "canard", version, about = "Fast-slow analysis and canard control of a resource consumption model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Sweep worker threads, 0 for all cores.
    #[arg(long, global = true, env = "CANARD_WORKERS")]
    workers: Option<usize>,
    /// Assert that no random number generator is used. Every algorithm is
    /// deterministic, so this only documents intent.
    #[arg(long, global = true)]
    seedless: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Open-loop trajectory.
    Simulate,
    /// Fold points with contact order and normal-form coefficients.
    Folds,
    /// Finite-difference expansion at the folds, optionally compared with a second system.
    Expand,
    /// Closed-loop run with scheduled controllers and a convergence report.
    Control,
    /// Two-parameter fold-count map.
    Sweep,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::config("--config", "required"))?;
    let cfg = config::load(path)?;
    match cli.command {
        Command::Simulate => commands::simulate(&cfg, &cli.out),
        Command::Folds => commands::folds(&cfg, &cli.out),
        Command::Expand => commands::expand_cmd(&cfg, &cli.out),
        Command::Control => commands::control(&cfg, &cli.out),
        Command::Sweep => commands::sweep(&cfg, &cli.out, cli.workers),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("canard: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
