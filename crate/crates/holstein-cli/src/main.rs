//! `holstein` — command-line workbench for the semiclassical Holstein
//! model: exact simulation, quench-dataset generation, surrogate training,
//! rollout, and climate evaluation.
//!
//! Exit codes: `0` success, `2` usage or configuration error, `3` runtime
//! integrity failure (numeric divergence, corrupt files, broken contracts).

mod commands;
mod manifest;

use clap::{Parser, Subcommand};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "holstein",
    version,
    about = "Ehrenfest dynamics of the 1D Holstein model and learned surrogates",
    propagate_version = true
)]
struct Cli {
    /// Worker threads for trajectory-level parallelism (gen-data, climate).
    /// Falls back to the HOLSTEIN_JOBS environment variable, then to one
    /// thread per core.  Results are independent of the thread count.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one quench trajectory exactly and write it as a blob.
    Simulate(commands::simulate::SimulateArgs),
    /// Generate a shallow or deep quench dataset directory.
    GenData(commands::gen_data::GenDataArgs),
    /// Train a surrogate on a dataset; writes checkpoint and metrics.
    Train(commands::train::TrainArgs),
    /// Roll a trained surrogate (or the exact oracle) from a stored state.
    Rollout(commands::rollout::RolloutArgs),
    /// Compare rollout climate statistics against reference trajectories.
    Climate(commands::climate::ClimateArgs),
}

/// Errors carrying their exit-code classification.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config, impossible request: exit code 2.
    Usage(String),
    /// The computation or its inputs violated a runtime contract: exit 3.
    Integrity(String),
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }
    fn integrity(msg: impl Into<String>) -> Self {
        Self::Integrity(msg.into())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Integrity(m) => write!(f, "{m}"),
        }
    }
}

// Library errors classify by variant: what a user can fix by changing the
// invocation is usage; what signals a broken computation or file is
// integrity.
impl From<holstein::dynamics::DynamicsError> for CliError {
    fn from(e: holstein::dynamics::DynamicsError) -> Self {
        use holstein::dynamics::DynamicsError as E;
        match &e {
            E::BadLattice(_) | E::InvalidArgument(_) => CliError::usage(e.to_string()),
            _ => CliError::integrity(e.to_string()),
        }
    }
}

impl From<holstein::datagen::DataError> for CliError {
    fn from(e: holstein::datagen::DataError) -> Self {
        use holstein::datagen::DataError as E;
        use holstein::dynamics::DynamicsError as D;
        match &e {
            E::InvalidProtocol(_) | E::OutputNotEmpty(_) => CliError::usage(e.to_string()),
            E::Dynamics(D::BadLattice(_)) | E::Dynamics(D::InvalidArgument(_)) => {
                CliError::usage(e.to_string())
            }
            _ => CliError::integrity(e.to_string()),
        }
    }
}

impl From<holstein::model::ModelError> for CliError {
    fn from(e: holstein::model::ModelError) -> Self {
        use holstein::model::ModelError as E;
        match &e {
            E::InvalidConfig(_) => CliError::usage(e.to_string()),
            _ => CliError::integrity(e.to_string()),
        }
    }
}

impl From<holstein::trainer::TrainError> for CliError {
    fn from(e: holstein::trainer::TrainError) -> Self {
        use holstein::trainer::TrainError as E;
        match &e {
            E::InvalidConfig(_) | E::SegmentTooShort { .. } => CliError::usage(e.to_string()),
            _ => CliError::integrity(e.to_string()),
        }
    }
}

impl From<holstein::analysis::AnalysisError> for CliError {
    fn from(e: holstein::analysis::AnalysisError) -> Self {
        use holstein::analysis::AnalysisError as E;
        match &e {
            E::InvalidArgument(_) => CliError::usage(e.to_string()),
            _ => CliError::integrity(e.to_string()),
        }
    }
}

impl From<holstein::container::ContainerError> for CliError {
    fn from(e: holstein::container::ContainerError) -> Self {
        CliError::integrity(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::integrity(format!("io: {e}"))
    }
}

fn configure_jobs(flag: Option<usize>) -> Result<usize, CliError> {
    let jobs = match flag {
        Some(j) => Some(j),
        None => match std::env::var("HOLSTEIN_JOBS") {
            Ok(raw) => Some(raw.parse::<usize>().map_err(|_| {
                CliError::usage(format!("HOLSTEIN_JOBS must be a positive integer, got {raw:?}"))
            })?),
            Err(_) => None,
        },
    };
    if jobs == Some(0) {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    if let Some(j) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::integrity(format!("thread pool: {e}")))?;
        Ok(j)
    } else {
        Ok(rayon::current_num_threads())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let jobs = configure_jobs(cli.jobs)?;
    match cli.command {
        Command::Simulate(args) => commands::simulate::run(args, jobs),
        Command::GenData(args) => commands::gen_data::run(args, jobs),
        Command::Train(args) => commands::train::run(args, jobs),
        Command::Rollout(args) => commands::rollout::run(args, jobs),
        Command::Climate(args) => commands::climate::run(args, jobs),
    }
}

fn main() -> ExitCode {
    // clap itself exits 2 on malformed flags and 0 on --help/--version.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Integrity(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
