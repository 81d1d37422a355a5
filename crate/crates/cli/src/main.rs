//! `ciar-sim`: run collaborative-decoding experiments from a JSON config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad or unreadable configuration. Exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Anything that went wrong while running. Exit code 1.
    #[error("{0}")]
    Run(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl From<ciar_core::Error> for CliError {
    fn from(e: ciar_core::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(format!("io error: {e}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "ciar-sim", version, about = "Interval-gated cloud/device decoding simulator")]
pub struct Cli {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides decode.seed (and the seed of `verify`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides output_dir.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, env = "CIAR_SIM_JOBS")]
    pub jobs: Option<usize>,
    /// Overrides decode.tau; accepts "inf".
    #[arg(long, global = true, value_parser = parse_tau)]
    pub tau: Option<f64>,
    /// Overrides decode.rho.
    #[arg(long, global = true)]
    pub rho: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode with every configured policy and write metrics and traces.
    Simulate,
    /// Run the sweep grid and write one metrics row per cell and policy.
    Sweep,
    /// Latency of CIAR and uniform-verification traces on every network profile.
    Netsim,
    /// Train an Inter-Head with the Inter-DRO loss.
    Train,
    /// Run the property-oracle suite.
    Verify {
        /// Vocabulary sizes for the interval checks.
        #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 64, 4096])]
        sizes: Vec<usize>,
        /// Random cases per check.
        #[arg(long, default_value_t = 1000)]
        cases: usize,
    },
}

fn parse_tau(s: &str) -> Result<f64, String> {
    ciar_core::decoder::tau_serde::parse(s)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
