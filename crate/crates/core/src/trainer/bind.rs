//! Builds one forward/backward pass from a network, a weight mode and a
//! target distribution.

use std::rc::Rc;

use crate::autodiff::{AutodiffError, Graph, NodeId};
use crate::model::{ModelError, Network};
use crate::tensor::Tensor;

use super::{MaskSet, TrainError};

pub(crate) enum WeightMode<'a> {
    Dense,
    Masked(&'a MaskSet),
    /// Progressive freezing: `union[i]` is the 0/1 multiplier of weights
    /// that stay frozen; unprunable parameters (`None`) are frozen whole.
    Freeze(&'a [Option<Rc<Tensor>>]),
}

pub(crate) struct PassOutput {
    pub loss: f64,
    pub logits: Tensor,
    pub leaf_grads: Vec<Tensor>,
    /// Gradient w.r.t. the masked weight actually used in the forward pass.
    pub effective_grads: Vec<Tensor>,
}

fn binding(g: &mut Graph, net: &Network, use_ema: bool, mode: &WeightMode) -> Result<(Vec<NodeId>, Vec<NodeId>), TrainError> {
    let mut leaves = Vec::with_capacity(net.params.len());
    let mut effective = Vec::with_capacity(net.params.len());
    for (i, p) in net.params.iter().enumerate() {
        let value = if use_ema { &p.ema } else { &p.value };
        let leaf = g.leaf(value.clone(), true);
        let eff = match mode {
            WeightMode::Dense => leaf,
            WeightMode::Masked(set) => match &set[i] {
                Some(mask) => crate::pruning::apply_mask(g, leaf, mask)?,
                None => leaf,
            },
            WeightMode::Freeze(union) => match &union[i] {
                Some(keep) => {
                    let frozen = g.mul_const(leaf, keep.clone())?;
                    let frozen = g.stop_gradient(frozen)?;
                    let free = g.mul_const(leaf, Rc::new(keep.map(|k| 1.0 - k)))?;
                    g.add(frozen, free)?
                }
                None => g.stop_gradient(leaf)?,
            },
        };
        leaves.push(leaf);
        effective.push(eff);
    }
    Ok((leaves, effective))
}

fn lift(err: ModelError) -> TrainError {
    match err {
        ModelError::Autodiff(e) => TrainError::Autodiff(e),
        other => TrainError::Model(other),
    }
}

/// Inference only: logits of `inputs` under the given weights.
pub(crate) fn logits(net: &Network, use_ema: bool, mode: &WeightMode, inputs: &Tensor) -> Result<Tensor, TrainError> {
    let mut g = Graph::new();
    let (_, effective) = binding(&mut g, net, use_ema, mode)?;
    let out = net.forward(&mut g, &effective, inputs).map_err(lift)?;
    Ok(g.value(out).clone())
}

/// Forward and backward against `target`; logits are divided by
/// `temperature` before the softmax.
pub(crate) fn pass(
    net: &Network,
    mode: &WeightMode,
    inputs: &Tensor,
    target: Rc<Tensor>,
    temperature: f64,
) -> Result<PassOutput, TrainError> {
    let mut g = Graph::new();
    let (leaves, effective) = binding(&mut g, net, false, mode)?;
    let out = net.forward(&mut g, &effective, inputs).map_err(lift)?;
    let scaled = if temperature == 1.0 { out } else { g.scale(out, 1.0 / temperature)? };
    let loss = g.softmax_cross_entropy(scaled, target)?;
    let mut grads = g.backward(loss)?;
    let zeros = |i: usize| Tensor::zeros(net.params[i].value.shape());
    let effective_grads = effective
        .iter()
        .enumerate()
        .map(|(i, &id)| grads.get(id).cloned().unwrap_or_else(|| zeros(i)))
        .collect();
    let leaf_grads = leaves
        .iter()
        .enumerate()
        .map(|(i, &id)| grads.take(id).unwrap_or_else(|| zeros(i)))
        .collect();
    Ok(PassOutput {
        loss: g.value(loss).item(),
        logits: g.value(out).clone(),
        leaf_grads,
        effective_grads,
    })
}

/// Re-tags a non-finite failure with the configuration and step it
/// happened at.
pub(crate) fn tag(err: TrainError, config: &str, step: u64) -> TrainError {
    match err {
        TrainError::Autodiff(source @ AutodiffError::NonFinite { .. }) => TrainError::Diverged {
            config: config.to_string(),
            step,
            source,
        },
        other => other,
    }
}

pub(crate) fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let classes = logits.cols();
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(&logits.data()[i * classes..(i + 1) * classes]) == l)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// First index of the maximum.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
