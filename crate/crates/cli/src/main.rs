//! `liqhjb`: train, validate, sweep and Monte Carlo check the solver from
//! the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 a run stopped
//! at its iteration budget, 3 a validation threshold failed.

mod args;
mod manifest;
mod mc_check;
mod solve;
mod sweep;
mod validate;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use args::{CommonArgs, SeedArgs};

#[derive(Debug, Parser)]
#[command(
    name = "liqhjb",
    version,
    about = "Deep policy iteration for portfolio choice with liquidity costs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one or more seeds and export surfaces, traces and checkpoints.
    Solve {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Train the frictionless problem and compare with the closed form.
    Validate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        seeds: SeedArgs,
        #[command(flatten)]
        slice: args::SliceArg,
    },
    /// One full solve per value of a friction parameter.
    Sweep(sweep::SweepArgs),
    /// Simulate wealth under an exported policy surface and compare the
    /// mean terminal utility with the exported value.
    McCheck(mc_check::McCheckArgs),
}

/// Successful completion, possibly without convergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Done,
    NotConverged,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration.
    Usage(String),
    Core(liqhjb::Error),
    /// One of several runs failed; its message is kept.
    Failed(String),
    /// A check ran and failed its threshold.
    Validation(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(_) | CliError::Failed(_) => 1,
            CliError::Validation(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Failed(m) => write!(f, "{m}"),
            CliError::Validation(m) => write!(f, "validation failed: {m}"),
        }
    }
}

impl From<liqhjb::Error> for CliError {
    fn from(e: liqhjb::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn run(cli: Cli) -> CliResult<Status> {
    match cli.command {
        Command::Solve { common, seeds } => solve::run(&common, &seeds),
        Command::Validate { common, seeds, slice } => validate::run(&common, &seeds, &slice),
        Command::Sweep(a) => sweep::run(&a),
        Command::McCheck(a) => mc_check::run(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not failures; clap's own usage
            // code would collide with the non-convergence code.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(Status::Done)) => ExitCode::SUCCESS,
        Ok(Ok(Status::NotConverged)) => ExitCode::from(2),
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(_) => {
            eprintln!("error: internal failure");
            ExitCode::from(1)
        }
    }
}
