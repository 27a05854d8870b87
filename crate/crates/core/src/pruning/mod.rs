//! Masks, block scoring, sparsity configurations and schedules.

mod config;
mod mask;
mod schedule;
mod score;
mod snn;

use thiserror::Error;

pub use config::{
    build_toy_plan, pattern_matches, SparsityConfig, SparsityPlan, FC_PATTERN, LSTM_PATTERN,
};
pub use mask::{apply_mask, apply_multiplier, mask_union, BinaryMask, BlockGrid};
pub use schedule::{cubic_sparsity, PruneSchedule};
pub use score::{block_scores, get_mask, prune_count, rank_blocks};
pub use snn::{snn_structured_mask, snn_thresholds};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruningError {
    #[error("block height must be positive, got {0}")]
    BlockHeight(usize),
    #[error("sparsity must lie in [0, 1), got {0}")]
    Sparsity(f64),
    #[error("ramp length must be positive")]
    RampSteps,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("mask is not aligned to its blocks (block {block} is mixed)")]
    NotBlockAligned { block: usize },
    #[error("mask union of an empty list")]
    EmptyUnion,
    #[error("masks of rank {0} cannot be serialized")]
    UnsupportedRank(usize),
    #[error("corrupt mask data: {0}")]
    Corrupt(String),
    #[error("no pattern in config {config} matches weight {weight}")]
    Unmatched { config: String, weight: String },
    #[error("several patterns in config {config} match weight {weight}")]
    AmbiguousMatch { config: String, weight: String },
    #[error("sparsity plan is empty")]
    EmptyPlan,
    #[error("first configuration {0} must be the full model (all levels 0)")]
    FirstConfigNotFull(String),
    #[error("duplicate configuration name {0}")]
    DuplicateConfig(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}
