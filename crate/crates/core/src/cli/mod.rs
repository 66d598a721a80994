//! The `hsis` command line.
//!
//! Every subcommand reads a TOML [`RunConfig`](crate::config::RunConfig),
//! applies `--set section.key=value` overrides and writes into
//! `<out>/<config hash>/<subcommand>/`. Exit codes: `0` success, `1` runtime
//! failure, `2` configuration error, `3` failed numerical certificate.

mod commands;
pub mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "hsis",
    version,
    about = "SIS household epidemics: simulation, forward equations, equilibria"
)]
pub struct Cli {
    /// Worker threads for replica farms (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Root of the output tree.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Override a configuration key, e.g. `--set fp.dt=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct Seeded {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Exact simulation of the N-household system.
    Simulate(Seeded),
    /// Integrate the forward equation (nonlinear or forced).
    Fp(Common),
    /// Monotone bracketing of the nonlinear mean path.
    Fixedpoint(Common),
    /// R0, endemic level and Malthusian rate.
    Equilibrium {
        #[command(flatten)]
        common: Common,
        /// Needed when `equilibrium.replicas > 0`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-N convergence study against the mean-field limit.
    Chaos(Seeded),
    /// Household branching process and its growth rate.
    Branching(Seeded),
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("certificate failure: {0}")]
    Certificate(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failure(_) => 1,
            CliError::Config(_) => 2,
            CliError::Certificate(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(format!("io: {e}"))
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate(s) | Command::Chaos(s) | Command::Branching(s) => &s.common,
            Command::Fp(c) | Command::Fixedpoint(c) | Command::Equilibrium { common: c, .. } => c,
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            Command::Simulate(s) | Command::Chaos(s) | Command::Branching(s) => Some(s.seed),
            Command::Equilibrium { seed, .. } => *seed,
            Command::Fp(_) | Command::Fixedpoint(_) => None,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Fp(_) => "fp",
            Command::Fixedpoint(_) => "fixedpoint",
            Command::Equilibrium { .. } => "equilibrium",
            Command::Chaos(_) => "chaos",
            Command::Branching(_) => "branching",
        }
    }
}

/// Runs a parsed command line; returns the output directory.
pub fn execute(cli: &Cli) -> Result<PathBuf, CliError> {
    let common = cli.command.common();
    let config = RunConfig::load(&common.config, &common.overrides)?;
    let seed = cli.command.seed();
    let out = output::OutputDir::create(&common.out, &config.hash(seed), cli.command.name())?;
    let run = || commands::dispatch(&cli.command, &config, seed, &out);
    match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Failure(e.to_string()))?
            .install(run)?,
        None => run()?,
    }
    Ok(out.path().to_path_buf())
}

pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("hsis: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
