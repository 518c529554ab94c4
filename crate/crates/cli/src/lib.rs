//! `decorre-lab`: dataset generation, cross-validated training grids,
//! Histogram of Correlations export and summary tables.
//!
//! Exit codes: 0 on success, 1 for invalid flags, configuration or inputs,
//! 2 for failures while running (I/O, numerical errors).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod experiment;
pub mod output;

pub use commands::{cmd_generate, cmd_hoc, cmd_report, cmd_train, GenerateArgs, HocArgs, ReportArgs, TrainArgs};
pub use experiment::{Experiment, ExperimentFile};

/// Environment variable naming the default output directory of `train`.
pub const OUT_DIR_ENV: &str = "DECORRE_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<decorre_core::Error> for CliError {
    fn from(e: decorre_core::Error) -> Self {
        use decorre_core::Error as E;
        match e {
            E::InvalidConfig(_) | E::EmptyRecords | E::SingleClass | E::BatchTooSmall(_) | E::Format(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "decorre-lab", version, about = "DecorreLayer training laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired ROI/control-region dataset and its manifest.
    Generate {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Blob amplitude of the class signal.
        #[arg(long, default_value_t = decorre_core::harness::DEFAULT_SIGNAL_STRENGTH)]
        signal: f64,
        /// Dataset file; the manifest is written next to it as `<stem>.manifest.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the training conditions of an experiment file.
    Train {
        #[arg(long)]
        experiment: PathBuf,
        /// Output directory. Falls back to the experiment's `out_dir`, then
        /// `$DECORRE_OUT_DIR`, then `runs`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram of Correlations from the record dumps of a training output.
    Hoc {
        /// Training output directory (or a single run directory).
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value_t = 40)]
        bins: usize,
        /// Snapshot epoch; defaults to each run's checkpoint epoch.
        #[arg(long, conflicts_with = "all_epochs")]
        epoch: Option<usize>,
        /// Pool every recorded epoch.
        #[arg(long)]
        all_epochs: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean and std AUC per (condition, test set) over every run found.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// CSV destination; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { n, seed, signal, out } => cmd_generate(&GenerateArgs { n, seed, signal, out }).map(|_| ()),
        Command::Train { experiment, out } => cmd_train(&TrainArgs { experiment, out }).map(|_| ()),
        Command::Hoc {
            records,
            bins,
            epoch,
            all_epochs,
            out,
        } => cmd_hoc(&HocArgs {
            records,
            bins,
            epoch,
            all_epochs,
            out,
        })
        .map(|_| ()),
        Command::Report { runs, out } => {
            let csv = cmd_report(&ReportArgs { runs, out: out.clone() })?;
            if out.is_none() {
                print!("{csv}");
            }
            Ok(())
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
