//! `hopper`: batch front end for the hopping-robot toolkit.
//!
//! Exit status is 0 on success, 2 for configuration or input-file errors and
//! 3 when a solve, fit or simulation fails numerically.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::config::{CommonArgs, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Output { .. } => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hopper", version, about = "Hybrid simulation, hop optimization and analysis for moving-mass hopping robots")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Minimum-effort periodic hops, one per height.
    Optimize,
    /// Replays a solution for `--hops` hops (open loop, or PD with `--pd`).
    Simulate {
        /// HopSolution JSON written by `optimize`.
        #[arg(long)]
        solution: PathBuf,
        /// Output sample spacing, s.
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
    },
    /// Poincaré eigenvalues of the playback orbit.
    Stability {
        /// HopSolution JSON; without it the hop is optimized at the single `--heights` value.
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Energy and peak-force comparison of both variants over `--heights`.
    Report {
        /// Emit the embedded published table instead of solving.
        #[arg(long)]
        fixture: bool,
    },
    /// Fits spring and damper coefficients to a drop-test log.
    Fit {
        /// CSV with header `t` plus any of `z_b,y,delta`.
        #[arg(long)]
        log: PathBuf,
        /// Foot height at release, m.
        #[arg(long)]
        initial_height: f64,
        /// Coefficients to fit.
        #[arg(long, default_value = "c_b,c_p,c_s,k_p,k_s")]
        free: String,
    },
    /// Writes a synthetic drop-test log.
    SynthLog {
        #[arg(long, default_value_t = 0.3)]
        initial_height: f64,
        #[arg(long, default_value_t = 1.5)]
        duration: f64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        /// Gaussian noise standard deviation, m.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&cli.common)?;
    match cli.command {
        Command::Optimize => commands::optimize(&cfg),
        Command::Simulate { solution, dt } => commands::simulate(&cfg, &solution, dt),
        Command::Stability { solution } => commands::stability(&cfg, solution.as_deref()),
        Command::Report { fixture } => commands::report(&cfg, fixture),
        Command::Fit { log, initial_height, free } => commands::fit(&cfg, &log, initial_height, &free),
        Command::SynthLog { initial_height, duration, dt, noise } => {
            commands::synth_log(&cfg, initial_height, duration, dt, noise)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hopper: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
