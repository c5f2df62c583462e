//! Command implementations behind the `otta` binary.
//!
//! Exit codes: 0 success, 1 output or unexpected failure, 2 configuration or
//! input error, 3 training or adaptation failure, 4 sweep finished with
//! failed cells.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use otta_core::signal::Domain;
use otta_core::OttaError;

pub use commands::{run, Completion};
pub use config::RunConfig;

/// Rejected configuration, flag or input file.
#[derive(Debug)]
pub struct InputError(String);

impl InputError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_TRAINING: u8 = 3;
pub const EXIT_PARTIAL: u8 = 4;

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<InputError>() {
            return EXIT_INPUT;
        }
        if let Some(e) = cause.downcast_ref::<OttaError>() {
            return match e {
                OttaError::TrainingFailure { .. }
                | OttaError::AdaptationFailure { .. }
                | OttaError::NumericFailure { .. } => EXIT_TRAINING,
                OttaError::Io(_) => EXIT_FAILURE,
                _ => EXIT_INPUT,
            };
        }
    }
    EXIT_FAILURE
}

#[derive(Debug, Parser)]
#[command(
    name = "otta",
    version,
    about = "Online test-time adaptation for streaming blood pressure estimation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration (required).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file (synth, pretrain) or directory (sweep, baseline).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Number of subjects to generate or evaluate.
    #[arg(long, global = true)]
    pub subjects: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a synthetic stream CSV.
    Synth {
        #[arg(long, default_value = "target")]
        domain: Domain,
    },
    /// Pretrain on labeled source data and write a checkpoint.
    Pretrain {
        /// Source stream CSV.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the frequency x initial-label grid and write reports.
    Sweep {
        /// Target stream CSV.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory for per-run prediction logs (JSON Lines).
        #[arg(long)]
        logs: Option<PathBuf>,
    },
    /// Evaluate the pretrained model without adaptation.
    Baseline {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        logs: Option<PathBuf>,
    },
}
