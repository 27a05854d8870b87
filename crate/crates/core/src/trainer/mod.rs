//! Super-network training: dense pretraining, the multi-configuration loop
//! with lazy updates and in-place distillation, progressive freezing, and
//! the single-sparsity and structured-slimmable baselines.

mod bind;
mod eval;
mod freeze;
mod step;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::data::DataError;
use crate::model::{ModelError, Network};
use crate::optim::{AdamConfig, AdamState, OptimError};
use crate::pruning::{BinaryMask, PruningError, SparsityPlan};
use crate::tensor::Tensor;

pub use eval::{evaluate, Metrics};
pub use freeze::{progressive_freeze, union_masks};
pub use step::{
    distillation_loss, distillation_target, dsnn_train_step, pretrain, pretrain_with, single_sparsity_step, train_dsnn, train_dsnn_with,
    train_single_sparsity, train_snn_baseline, MaskPolicy, StepReport,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training plan: {0}")]
    InvalidPlan(String),
    #[error("loss diverged for config {config} at step {step}: {source}")]
    Diverged {
        config: String,
        step: u64,
        source: AutodiffError,
    },
    #[error("unknown config {name}; available: {}", available.join(", "))]
    UnknownConfig { name: String, available: Vec<String> },
    #[error("no masks stored for config {0}")]
    MissingMasks(String),
    #[error("step {step} is outside the training horizon of {steps} steps")]
    StepOutOfRange { step: u64, steps: u64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pruning(#[from] PruningError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub plan: SparsityPlan,
    /// Multi-configuration steps `T`.
    pub steps: u64,
    /// Progressive-freezing steps `T′`.
    pub freeze_steps: u64,
    /// Mask refresh period `F` (in steps).
    pub mask_update_frequency: u64,
    pub ramp_steps: u64,
    pub block_height: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub ema_decay: f64,
    pub seed: u64,
    /// Train sparse configs against the full model's output distribution.
    pub distillation: bool,
    /// Accumulate gradients over all configs into one update and refresh
    /// masks every `F` steps. When off, every config updates immediately
    /// and masks refresh every step.
    pub lazy_update: bool,
    pub progressive_freezing: bool,
    pub temperature: f64,
    /// Weight of the one-hot labels mixed into the distillation target.
    pub ground_truth_mix: f64,
    /// A metric record is kept every this many steps.
    pub log_every: u64,
}

impl TrainPlan {
    /// Toy-scale defaults.
    pub fn toy(plan: SparsityPlan) -> Self {
        Self {
            plan,
            steps: 10_000,
            freeze_steps: 1_000,
            mask_update_frequency: 100,
            ramp_steps: 2_000,
            block_height: 4,
            batch_size: 32,
            adam: AdamConfig::default(),
            ema_decay: 0.999,
            seed: 0,
            distillation: true,
            lazy_update: true,
            progressive_freezing: true,
            temperature: 1.0,
            ground_truth_mix: 0.0,
            log_every: 10,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidPlan(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.mask_update_frequency == 0 {
            return bad("mask update frequency must be >= 1");
        }
        if self.ramp_steps == 0 {
            return bad("ramp steps must be >= 1");
        }
        if self.block_height == 0 {
            return bad("block height must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema decay must lie in (0, 1)");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.ground_truth_mix) {
            return bad("ground truth mix must lie in [0, 1]");
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainerKind {
    Pretrain,
    Dsnn,
    Single { config: String },
    Snn,
}

impl TrainerKind {
    pub fn default_label(&self) -> String {
        match self {
            Self::Pretrain => "Pretrain".into(),
            Self::Dsnn => "DSNN".into(),
            Self::Single { config } => format!("Single_{}", config.chars().next().unwrap_or('?')),
            Self::Snn => "SNN".into(),
        }
    }
}

/// One metric line: `step, config, loss, accuracy, sparsity, wall_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub config: String,
    pub loss: f64,
    pub accuracy: f64,
    pub sparsity: f64,
    #[serde(skip)]
    pub wall_ms: f64,
}

pub const METRICS_HEADER: [&str; 6] = ["step", "config", "loss", "accuracy", "sparsity", "wall_ms"];

pub fn write_metrics_csv<W: std::io::Write>(out: W, records: &[MetricRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.config.clone(),
            r.loss.to_string(),
            r.accuracy.to_string(),
            r.sparsity.to_string(),
            format!("{:.3}", r.wall_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-parameter masks of one configuration; `None` for unprunable
/// parameters.
pub type MaskSet = Vec<Option<BinaryMask>>;

/// A trained weight set plus the per-configuration mask table.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperNetwork {
    pub network: Network,
    pub plan: SparsityPlan,
    pub block_height: usize,
    /// `masks[c]` is present iff configuration `c` can be evaluated.
    pub masks: Vec<Option<MaskSet>>,
    /// Gradient of the previous step, used to score blocks.
    pub stored_grad: Vec<Tensor>,
    pub adam: AdamState,
    pub step: u64,
    pub kind: TrainerKind,
    pub label: String,
    pub history: Vec<MetricRecord>,
}

impl SuperNetwork {
    /// Fresh super-network with all-ones masks for every configuration and
    /// zeroed score gradients.
    pub fn new(network: Network, plan: SparsityPlan, block_height: usize, adam: AdamConfig, kind: TrainerKind) -> Result<Self, TrainError> {
        plan.validate(&network.prunable_names())?;
        let shapes: Vec<&[usize]> = network.params.iter().map(|p| p.value.shape()).collect();
        let adam = AdamState::new(adam, &shapes)?;
        let stored_grad = network.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let ones = all_ones(&network, block_height);
        let masks = vec![Some(ones); plan.len()];
        let label = kind.default_label();
        Ok(Self {
            network,
            plan,
            block_height,
            masks,
            stored_grad,
            adam,
            step: 0,
            kind,
            label,
            history: Vec::new(),
        })
    }

    /// Starts a sparse training stage from a pretrained model: weights are
    /// initialised from its EMA shadows, optimizer state is fresh.
    pub fn from_pretrained(pre: &SuperNetwork, train: &TrainPlan, kind: TrainerKind) -> Result<Self, TrainError> {
        let mut network = pre.network.clone();
        for p in &mut network.params {
            p.value = p.ema.clone();
            p.grad.fill(0.0);
        }
        Self::new(network, train.plan.clone(), train.block_height, train.adam, kind)
    }

    pub fn config_index(&self, name: &str) -> Result<usize, TrainError> {
        self.plan.index_of(name).ok_or_else(|| TrainError::UnknownConfig {
            name: name.to_string(),
            available: self.plan.names().iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn mask_set(&self, config: usize) -> Result<&MaskSet, TrainError> {
        self.masks[config]
            .as_ref()
            .ok_or_else(|| TrainError::MissingMasks(self.plan.configs()[config].name.clone()))
    }

    /// Names of configurations with stored masks.
    pub fn available_configs(&self) -> Vec<&str> {
        self.plan
            .names()
            .into_iter()
            .zip(&self.masks)
            .filter(|(_, m)| m.is_some())
            .map(|(n, _)| n)
            .collect()
    }

    /// Realized global sparsity of configuration `config` over prunable
    /// weights.
    pub fn realized_sparsity(&self, config: usize) -> Result<f64, TrainError> {
        let set = self.mask_set(config)?;
        let (zeros, total) = set
            .iter()
            .flatten()
            .fold((0, 0), |(z, t), m| (z + m.count_zeros(), t + m.len()));
        Ok(if total == 0 { 0.0 } else { zeros as f64 / total as f64 })
    }
}

pub(crate) fn all_ones(network: &Network, block_height: usize) -> MaskSet {
    (0..network.params.len())
        .map(|i| {
            network
                .is_prunable(i)
                .then(|| BinaryMask::ones(network.params[i].value.shape(), block_height))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::build_toy_plan;

    #[test]
    fn toy_defaults_are_valid() {
        let t = TrainPlan::toy(build_toy_plan());
        t.validate().unwrap();
        assert_eq!((t.steps, t.freeze_steps, t.mask_update_frequency, t.ramp_steps), (10_000, 1_000, 100, 2_000));
        assert_eq!(t.block_height, 4);
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let base = TrainPlan::toy(build_toy_plan());
        let cases: [fn(&mut TrainPlan); 6] = [
            |t| t.steps = 0,
            |t| t.mask_update_frequency = 0,
            |t| t.ramp_steps = 0,
            |t| t.ema_decay = 1.0,
            |t| t.temperature = 0.0,
            |t| t.ground_truth_mix = 1.5,
        ];
        for f in cases {
            let mut t = base.clone();
            f(&mut t);
            assert!(matches!(t.validate(), Err(TrainError::InvalidPlan(_))));
        }
    }

    #[test]
    fn every_config_starts_with_all_ones_masks() {
        let net = crate::model::Network::lstm(4, 8, 4, 3, 0).unwrap();
        let sn = SuperNetwork::new(net, build_toy_plan(), 4, AdamConfig::default(), TrainerKind::Dsnn).unwrap();
        for c in 0..3 {
            assert_eq!(sn.realized_sparsity(c).unwrap(), 0.0);
            let set = sn.mask_set(c).unwrap();
            for (i, m) in set.iter().enumerate() {
                assert_eq!(m.is_some(), sn.network.is_prunable(i));
            }
        }
        assert_eq!(sn.available_configs(), ["Large", "Medium", "Small"]);
    }

    #[test]
    fn labels_and_metrics_header() {
        assert_eq!(TrainerKind::Single { config: "Small".into() }.default_label(), "Single_S");
        let mut out = Vec::new();
        let rec = MetricRecord {
            step: 3,
            config: "Large".into(),
            loss: 0.5,
            accuracy: 1.0,
            sparsity: 0.0,
            wall_ms: 1.25,
        };
        write_metrics_csv(&mut out, &[rec]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "step,config,loss,accuracy,sparsity,wall_ms\n3,Large,0.5,1,0,1.250\n");
    }
}
