//! Evaluation of one configuration with the EMA weights.

use crate::data::SyntheticDataset;

use super::bind::{argmax, logits, WeightMode};
use super::{SuperNetwork, TrainError};

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Mean cross-entropy against the labels.
    pub loss: f64,
    pub accuracy: f64,
    /// Realized global sparsity over prunable weights.
    pub sparsity: f64,
}

/// Metrics of configuration `config` on `data`, using EMA shadows under the
/// configuration's stored masks.
pub fn evaluate(net: &SuperNetwork, config: &str, data: &SyntheticDataset) -> Result<Metrics, TrainError> {
    let c = net.config_index(config)?;
    let set = net.mask_set(c)?;
    let mode = WeightMode::Masked(set);
    let mut total = 0.0;
    let mut hits = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (inputs, labels) = data.batch(chunk);
        let z = logits(&net.network, true, &mode, &inputs)?;
        let classes = z.cols();
        for (i, &label) in labels.iter().enumerate() {
            let row = &z.data()[i * classes..(i + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = row.iter().map(|v| (v - max).exp()).sum();
            total += norm.ln() + max - row[label];
            if argmax(row) == label {
                hits += 1;
            }
        }
    }
    let n = data.len().max(1) as f64;
    Ok(Metrics {
        loss: total / n,
        accuracy: hits as f64 / n,
        sparsity: net.realized_sparsity(c)?,
    })
}
