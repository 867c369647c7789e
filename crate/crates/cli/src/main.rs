use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfg_broker_cli::commands;
use mfg_broker_cli::config::{split_overrides, RunConfig};
use mfg_broker_cli::error::{CliError, Result};

/// Mean-field broker/trader equilibrium: solve, simulate, verify, plot.
///
/// Any config field can be overridden with `--section.field value`,
/// e.g. `--grid.M 2000` or `--model.eta_B 0.002`.
#[derive(Parser)]
#[command(name = "mfg-broker", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration; defaults are used for anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; shorthand for `--sim.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; shorthand for `--outputs`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the coefficient equations and write them as CSV.
    Solve(Common),
    /// Solve, then simulate the equilibrium paths.
    Simulate(Common),
    /// Solve, then run the numerical check suite.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Only run the Gâteaux check against deliberately wrong strategies.
        #[arg(long)]
        negative_control_only: bool,
    },
    /// Draw the figures from the CSV files of an earlier run.
    Report(Common),
}

fn load(c: &Common, mut overrides: Vec<(String, String)>) -> Result<RunConfig> {
    if let Some(seed) = c.seed {
        overrides.push(("sim.seed".into(), seed.to_string()));
    }
    if let Some(out) = &c.out {
        let s = serde_json::to_string(out).map_err(|e| CliError::Validation(e.to_string()))?;
        overrides.push(("outputs".into(), s));
    }
    RunConfig::load(c.config.as_deref(), &overrides)
}

fn threads() -> Result<usize> {
    match std::env::var("MFG_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| CliError::Validation(format!("MFG_THREADS = {v:?} is not a positive integer"))),
        Err(_) => Ok(0),
    }
}

fn run() -> Result<()> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = Cli::parse_from(args);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads()?)
        .build_global()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    match cli.command {
        Command::Solve(c) => commands::cmd_solve(&load(&c, overrides)?),
        Command::Simulate(c) => commands::cmd_simulate(&load(&c, overrides)?),
        Command::Verify {
            common,
            negative_control_only,
        } => {
            let cfg = load(&common, overrides)?;
            if negative_control_only {
                commands::cmd_verify_negative_control(&cfg)
            } else {
                commands::cmd_verify(&cfg)
            }
        }
        Command::Report(c) => commands::cmd_report(&load(&c, overrides)?),
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
