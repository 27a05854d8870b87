//! Experiment driver for dynamic sparsity networks: configuration files,
//! training and evaluation commands, comparison reports and kernel
//! benchmarks.
//!
//! Exit codes are a stable contract: 0 on success, 1 for usage and
//! configuration errors, 2 for runtime or numeric failures.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use dsnn_core::checkpoint::CheckpointError;
use dsnn_core::data::DataError;
use dsnn_core::sparse::SparseError;
use dsnn_core::trainer::TrainError;
use thiserror::Error;

pub use commands::{run, Cli};
pub use config::{ConfigError, ExperimentConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no checkpoint at {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_)
            | Self::Config(_)
            | Self::MissingCheckpoint(_)
            | Self::Incompatible(_)
            | Self::Train(TrainError::UnknownConfig { .. } | TrainError::InvalidPlan(_)) => 1,
            _ => 2,
        }
    }
}
