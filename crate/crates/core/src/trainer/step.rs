//! Training steps and the loops around them.

use std::rc::Rc;
use std::time::Instant;

use crate::autodiff::{softmax_rows, AutodiffError, Graph, NodeId};
use crate::data::{one_hot, BatchSampler, SyntheticDataset};
use crate::model::Network;
use crate::optim::ema_update;
use crate::pruning::{get_mask, snn_structured_mask, BinaryMask, PruneSchedule};
use crate::tensor::{Tensor, TensorError};

use super::bind::{accuracy, pass, tag, WeightMode};
use super::freeze::progressive_freeze;
use super::{MetricRecord, SuperNetwork, TrainError, TrainPlan, TrainerKind};

/// How sparse masks are produced on refresh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPolicy {
    /// Block-wise gradient-times-weight scoring.
    Scored,
    /// Structure-only leading-index masks.
    Structured,
}

/// Batch metrics of one training step, one record per configuration in the
/// order they were processed.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub refreshed: bool,
    pub records: Vec<MetricRecord>,
}

type Observer<'a> = &'a mut dyn FnMut(&SuperNetwork, &StepReport);

/// Cross-entropy of `student` logits against the softmax of `teacher`
/// logits, both divided by `temperature`. The teacher enters as a constant,
/// so no gradient reaches it.
pub fn distillation_loss(g: &mut Graph, student: NodeId, teacher: NodeId, temperature: f64) -> Result<NodeId, TrainError> {
    let (s, t) = (g.value(student).shape().to_vec(), g.value(teacher).shape().to_vec());
    if s != t {
        return Err(AutodiffError::from(TensorError::ShapeMismatch {
            op: "distillation_loss",
            lhs: s,
            rhs: t,
        })
        .into());
    }
    let target = softmax_rows(g.value(teacher), temperature).map_err(AutodiffError::from)?;
    let scaled = if temperature == 1.0 { student } else { g.scale(student, 1.0 / temperature)? };
    Ok(g.softmax_cross_entropy(scaled, Rc::new(target))?)
}

/// Target of a sparse configuration: the tempered teacher distribution,
/// optionally mixed with the one-hot labels.
pub fn distillation_target(
    teacher_logits: &Tensor,
    labels: &[usize],
    temperature: f64,
    ground_truth_mix: f64,
) -> Result<Tensor, TrainError> {
    let probs = softmax_rows(teacher_logits, temperature).map_err(AutodiffError::from)?;
    if ground_truth_mix == 0.0 {
        return Ok(probs);
    }
    let hot = one_hot(labels, teacher_logits.cols());
    Ok(probs.zip_map(&hot, "distillation_target", |p, y| (1.0 - ground_truth_mix) * p + ground_truth_mix * y)
        .map_err(AutodiffError::from)?)
}

fn record(net: &SuperNetwork, config: usize, step: u64, loss: f64, accuracy: f64, started: Instant) -> Result<MetricRecord, TrainError> {
    Ok(MetricRecord {
        step,
        config: net.plan.configs()[config].name.clone(),
        loss,
        accuracy,
        sparsity: net.realized_sparsity(config)?,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

fn apply_update(net: &mut SuperNetwork, grads: &[Tensor]) -> Result<(), TrainError> {
    let mut values: Vec<&mut Tensor> = net.network.params.iter_mut().map(|p| &mut p.value).collect();
    let grads: Vec<&Tensor> = grads.iter().collect();
    net.adam.step(&mut values, &grads)?;
    Ok(())
}

fn update_ema(net: &mut SuperNetwork, decay: f64) -> Result<(), TrainError> {
    for p in &mut net.network.params {
        ema_update(&mut p.ema, &p.value, decay)?;
    }
    Ok(())
}

fn add_into(acc: &mut [Tensor], grads: &[Tensor]) -> Result<(), TrainError> {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.add_assign(g).map_err(AutodiffError::from)?;
    }
    Ok(())
}

pub(super) fn refresh_masks(net: &mut SuperNetwork, config: usize, step: u64, train: &TrainPlan, policy: MaskPolicy) -> Result<(), TrainError> {
    let cfg = &net.plan.configs()[config];
    let mut set = Vec::with_capacity(net.network.params.len());
    for (i, p) in net.network.params.iter().enumerate() {
        if !net.network.is_prunable(i) {
            set.push(None);
            continue;
        }
        let target = cfg.level_for(&p.name)?;
        let sparsity = PruneSchedule::new(train.ramp_steps, target)?.at(step);
        let mask: BinaryMask = match policy {
            MaskPolicy::Scored => get_mask(&p.value, &net.stored_grad[i], sparsity, net.block_height)?,
            MaskPolicy::Structured => snn_structured_mask(p.value.shape(), sparsity)?,
        };
        set.push(Some(mask));
    }
    net.masks[config] = Some(set);
    Ok(())
}

fn check_step(step: u64, train: &TrainPlan) -> Result<(), TrainError> {
    if step >= train.steps {
        return Err(TrainError::StepOutOfRange {
            step,
            steps: train.steps,
        });
    }
    Ok(())
}

/// One multi-configuration step at step `step`.
///
/// The full model trains on the labels. Every sparse configuration, in
/// ascending order of average sparsity, refreshes its masks from the stored
/// gradient when `step` is a multiple of the refresh period, then trains
/// against the full model's output (or the labels when distillation is off).
/// With lazy updates the gradients of all configurations are summed into a
/// single optimizer step; the sum becomes the next step's scoring gradient.
pub fn dsnn_train_step(
    net: &mut SuperNetwork,
    inputs: &Tensor,
    labels: &[usize],
    step: u64,
    train: &TrainPlan,
    policy: MaskPolicy,
) -> Result<StepReport, TrainError> {
    dsnn_step_timed(net, inputs, labels, step, train, policy, Instant::now())
}

fn dsnn_step_timed(
    net: &mut SuperNetwork,
    inputs: &Tensor,
    labels: &[usize],
    step: u64,
    train: &TrainPlan,
    policy: MaskPolicy,
    started: Instant,
) -> Result<StepReport, TrainError> {
    check_step(step, train)?;
    let classes = net.network.arch.classes();
    let full_name = net.plan.configs()[0].name.clone();
    let truth = Rc::new(one_hot(labels, classes));

    let full = pass(&net.network, &WeightMode::Dense, inputs, truth.clone(), 1.0).map_err(|e| tag(e, &full_name, step))?;
    let mut records = vec![record(net, 0, step, full.loss, accuracy(&full.logits, labels), started)?];
    let mut accumulated = full.leaf_grads;
    if !train.lazy_update {
        apply_update(net, &accumulated)?;
    }

    let target = if train.distillation {
        Rc::new(distillation_target(&full.logits, labels, train.temperature, train.ground_truth_mix)?)
    } else {
        truth
    };
    let temperature = if train.distillation { train.temperature } else { 1.0 };

    let refreshed = !train.lazy_update || step % train.mask_update_frequency == 0;
    let order = net.plan.sparse_order(&net.network.prunable_sizes())?;
    for c in order {
        if refreshed {
            refresh_masks(net, c, step, train, policy)?;
        }
        let name = &net.plan.configs()[c].name;
        let out = pass(&net.network, &WeightMode::Masked(net.mask_set(c)?), inputs, target.clone(), temperature)
            .map_err(|e| tag(e, name, step))?;
        records.push(record(net, c, step, out.loss, accuracy(&out.logits, labels), started)?);
        if !train.lazy_update {
            apply_update(net, &out.leaf_grads)?;
        }
        add_into(&mut accumulated, &out.leaf_grads)?;
    }

    if train.lazy_update {
        apply_update(net, &accumulated)?;
    }
    net.stored_grad = accumulated;
    update_ema(net, train.ema_decay)?;
    net.step = step + 1;
    let report = StepReport {
        step,
        refreshed,
        records,
    };
    log(net, &report, train);
    Ok(report)
}

fn log(net: &mut SuperNetwork, report: &StepReport, train: &TrainPlan) {
    if report.step % train.log_every == 0 || report.step + 1 == train.steps {
        net.history.extend(report.records.iter().cloned());
    }
}

/// One step of a network trained at a single configuration on the labels.
/// Masks are scored with the gradient of the masked weights, so pruned
/// blocks can recover.
pub fn single_sparsity_step(
    net: &mut SuperNetwork,
    inputs: &Tensor,
    labels: &[usize],
    step: u64,
    train: &TrainPlan,
    config: usize,
) -> Result<StepReport, TrainError> {
    single_step_timed(net, inputs, labels, step, train, config, Instant::now())
}

fn single_step_timed(
    net: &mut SuperNetwork,
    inputs: &Tensor,
    labels: &[usize],
    step: u64,
    train: &TrainPlan,
    config: usize,
    started: Instant,
) -> Result<StepReport, TrainError> {
    check_step(step, train)?;
    let refreshed = step % train.mask_update_frequency == 0;
    if refreshed {
        refresh_masks(net, config, step, train, MaskPolicy::Scored)?;
    }
    let truth = Rc::new(one_hot(labels, net.network.arch.classes()));
    let name = &net.plan.configs()[config].name;
    let out = pass(&net.network, &WeightMode::Masked(net.mask_set(config)?), inputs, truth, 1.0)
        .map_err(|e| tag(e, name, step))?;
    let records = vec![record(net, config, step, out.loss, accuracy(&out.logits, labels), started)?];
    apply_update(net, &out.leaf_grads)?;
    net.stored_grad = out.effective_grads;
    update_ema(net, train.ema_decay)?;
    net.step = step + 1;
    let report = StepReport {
        step,
        refreshed,
        records,
    };
    log(net, &report, train);
    Ok(report)
}

/// Dense training on the labels for `train.steps` steps.
pub fn pretrain(network: Network, data: &SyntheticDataset, train: &TrainPlan, steps: u64) -> Result<SuperNetwork, TrainError> {
    pretrain_with(network, data, train, steps, &mut |_, _| {})
}

pub fn pretrain_with(
    network: Network,
    data: &SyntheticDataset,
    train: &TrainPlan,
    steps: u64,
    observer: Observer,
) -> Result<SuperNetwork, TrainError> {
    train.validate()?;
    let mut net = SuperNetwork::new(network, train.plan.clone(), train.block_height, train.adam, TrainerKind::Pretrain)?;
    let mut sampler = BatchSampler::new(data.len(), train.batch_size, train.seed);
    let started = Instant::now();
    let name = net.plan.configs()[0].name.clone();
    for step in 0..steps {
        let (inputs, labels) = data.batch(&sampler.next_batch());
        let truth = Rc::new(one_hot(&labels, net.network.arch.classes()));
        let out = pass(&net.network, &WeightMode::Dense, &inputs, truth, 1.0).map_err(|e| tag(e, &name, step))?;
        let records = vec![record(&net, 0, step, out.loss, accuracy(&out.logits, &labels), started)?];
        apply_update(&mut net, &out.leaf_grads)?;
        net.stored_grad = out.leaf_grads;
        update_ema(&mut net, train.ema_decay)?;
        net.step = step + 1;
        let report = StepReport {
            step,
            refreshed: false,
            records,
        };
        if step % train.log_every == 0 || step + 1 == steps {
            net.history.extend(report.records.iter().cloned());
        }
        observer(&net, &report);
    }
    Ok(net)
}

/// Multi-configuration training from a pretrained model, followed by
/// progressive freezing when enabled.
pub fn train_dsnn(pre: &SuperNetwork, data: &SyntheticDataset, train: &TrainPlan) -> Result<SuperNetwork, TrainError> {
    train_dsnn_with(pre, data, train, MaskPolicy::Scored, &mut |_, _| {})
}

/// The slimmable baseline: the same loop with structure-only masks.
pub fn train_snn_baseline(pre: &SuperNetwork, data: &SyntheticDataset, train: &TrainPlan) -> Result<SuperNetwork, TrainError> {
    train_dsnn_with(pre, data, train, MaskPolicy::Structured, &mut |_, _| {})
}

pub fn train_dsnn_with(
    pre: &SuperNetwork,
    data: &SyntheticDataset,
    train: &TrainPlan,
    policy: MaskPolicy,
    observer: Observer,
) -> Result<SuperNetwork, TrainError> {
    train.validate()?;
    let kind = match policy {
        MaskPolicy::Scored => TrainerKind::Dsnn,
        MaskPolicy::Structured => TrainerKind::Snn,
    };
    let mut net = SuperNetwork::from_pretrained(pre, train, kind)?;
    let mut sampler = BatchSampler::new(data.len(), train.batch_size, train.seed);
    let started = Instant::now();
    for step in 0..train.steps {
        let (inputs, labels) = data.batch(&sampler.next_batch());
        let report = dsnn_step_timed(&mut net, &inputs, &labels, step, train, policy, started)?;
        observer(&net, &report);
    }
    if train.progressive_freezing && train.freeze_steps > 0 {
        progressive_freeze(&mut net, data, train, policy, &mut sampler)?;
    }
    Ok(net)
}

/// A network trained from the pretrained model at configuration `config`
/// alone.
pub fn train_single_sparsity(pre: &SuperNetwork, data: &SyntheticDataset, train: &TrainPlan, config: &str) -> Result<SuperNetwork, TrainError> {
    train.validate()?;
    let mut net = SuperNetwork::from_pretrained(
        pre,
        train,
        TrainerKind::Single {
            config: config.to_string(),
        },
    )?;
    let c = net.config_index(config)?;
    let mut sampler = BatchSampler::new(data.len(), train.batch_size, train.seed);
    let started = Instant::now();
    for step in 0..train.steps {
        let (inputs, labels) = data.batch(&sampler.next_batch());
        single_step_timed(&mut net, &inputs, &labels, step, train, c, started)?;
    }
    Ok(net)
}
