//! Progressive freezing: weights kept by any sparse configuration are
//! frozen while the remaining dense-only weights keep training.

use std::rc::Rc;
use std::time::Instant;

use crate::data::{one_hot, BatchSampler, SyntheticDataset};
use crate::optim::ema_update_masked;
use crate::pruning::{mask_union, BinaryMask, PruningError};
use crate::tensor::Tensor;

use super::bind::{accuracy, pass, tag, WeightMode};
use super::step::{refresh_masks, MaskPolicy};
use super::{MaskSet, MetricRecord, SuperNetwork, TrainError, TrainPlan};

/// Per-parameter union of the masks of all sparse configurations.
pub fn union_masks(net: &SuperNetwork) -> Result<MaskSet, TrainError> {
    let sets: Vec<&MaskSet> = net.masks.iter().skip(1).flatten().collect();
    if sets.is_empty() {
        return Err(PruningError::EmptyUnion.into());
    }
    let mut out = Vec::with_capacity(net.network.params.len());
    for i in 0..net.network.params.len() {
        let members: Vec<&BinaryMask> = sets.iter().filter_map(|s| s[i].as_ref()).collect();
        out.push(if members.is_empty() { None } else { Some(mask_union(&members)?) });
    }
    Ok(out)
}

/// Whether the most recent mask refresh of the preceding training run
/// happened at or after the end of the ramp, so every sparse mask already
/// sits at its final sparsity.
fn masks_at_target(net: &SuperNetwork, train: &TrainPlan) -> bool {
    if net.step == 0 {
        return false;
    }
    let last = net.step - 1;
    let last_refresh = if train.lazy_update {
        last - last % train.mask_update_frequency
    } else {
        last
    };
    last_refresh >= train.ramp_steps
}

/// Trains only the weights outside the union of the sparse masks on the
/// labels for `train.freeze_steps` steps. Frozen entries, their optimizer
/// moments and their EMA shadows are left bit-for-bit unchanged;
/// unprunable parameters are frozen whole.
///
/// The sub-networks keep the masks they were trained with. Only when
/// training stopped before the ramp finished are the masks first moved to
/// their final sparsity.
pub fn progressive_freeze(
    net: &mut SuperNetwork,
    data: &SyntheticDataset,
    train: &TrainPlan,
    policy: MaskPolicy,
    sampler: &mut BatchSampler,
) -> Result<(), TrainError> {
    if net.plan.len() < 2 {
        return Ok(());
    }
    if !masks_at_target(net, train) {
        for c in 1..net.plan.len() {
            refresh_masks(net, c, u64::MAX, train, policy)?;
        }
    }
    let union = union_masks(net)?;
    let keep: Vec<Option<Rc<Tensor>>> = union.iter().map(|m| m.as_ref().map(|m| Rc::new(m.multiplier()))).collect();
    let trainable: Vec<Tensor> = net
        .network
        .params
        .iter()
        .zip(&keep)
        .map(|(p, k)| match k {
            Some(k) => k.map(|v| 1.0 - v),
            None => Tensor::zeros(p.value.shape()),
        })
        .collect();

    let name = net.plan.configs()[0].name.clone();
    let classes = net.network.arch.classes();
    let started = Instant::now();
    let first = net.step;
    for k in 0..train.freeze_steps {
        let step = first + k;
        let (inputs, labels) = data.batch(&sampler.next_batch());
        let truth = Rc::new(one_hot(&labels, classes));
        let out = pass(&net.network, &WeightMode::Freeze(&keep), &inputs, truth, 1.0).map_err(|e| tag(e, &name, step))?;

        let masks: Vec<Option<&Tensor>> = trainable.iter().map(Some).collect();
        let grads: Vec<&Tensor> = out.leaf_grads.iter().collect();
        let mut values: Vec<&mut Tensor> = net.network.params.iter_mut().map(|p| &mut p.value).collect();
        net.adam.step_masked(&mut values, &grads, &masks)?;
        for (p, t) in net.network.params.iter_mut().zip(&trainable) {
            ema_update_masked(&mut p.ema, &p.value, train.ema_decay, Some(t))?;
        }
        net.step = step + 1;

        if k % train.log_every == 0 || k + 1 == train.freeze_steps {
            net.history.push(MetricRecord {
                step,
                config: name.clone(),
                loss: out.loss,
                accuracy: accuracy(&out.logits, &labels),
                sparsity: 0.0,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    Ok(())
}
