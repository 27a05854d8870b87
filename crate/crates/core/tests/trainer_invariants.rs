//! Structural properties of the training loops.

use std::rc::Rc;

use dsnn_core::autodiff::softmax_rows;
use dsnn_core::data::{one_hot, BatchSampler, SyntheticDataset, TaskKind, TaskSpec};
use dsnn_core::model::Network;
use dsnn_core::pruning::{apply_mask, BinaryMask, SparsityConfig, SparsityPlan};
use dsnn_core::trainer::{
    dsnn_train_step, evaluate, pretrain, progressive_freeze, train_dsnn, train_dsnn_with, train_single_sparsity,
    union_masks, MaskPolicy, SuperNetwork, TrainError, TrainPlan, TrainerKind,
};
use dsnn_core::{Graph, Tensor};

fn task() -> (SyntheticDataset, SyntheticDataset) {
    TaskSpec {
        task: TaskKind::GaussianClusters {
            dim: 8,
            classes: 4,
            noise: 0.6,
        },
        seed: 3,
        train_size: 256,
        eval_size: 128,
    }
    .generate()
    .unwrap()
}

fn plan3() -> SparsityPlan {
    let cfg = |name: &str, s: f64| SparsityConfig::new(name, vec![("fc*".to_string(), s)]).unwrap();
    SparsityPlan::new(vec![cfg("Large", 0.0), cfg("Medium", 0.5), cfg("Small", 0.8)]).unwrap()
}

fn net() -> Network {
    Network::mlp(&[8, 16, 12, 4], 21).unwrap()
}

fn train_plan(plan: SparsityPlan) -> TrainPlan {
    let mut t = TrainPlan::toy(plan);
    t.steps = 60;
    t.freeze_steps = 30;
    t.ramp_steps = 30;
    t.mask_update_frequency = 5;
    t.batch_size = 16;
    t.adam.lr = 5e-3;
    t.ema_decay = 0.9;
    t.seed = 8;
    t
}

fn same_weights(a: &Network, b: &Network) {
    for (p, q) in a.params.iter().zip(&b.params) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.value), bits(&q.value), "{}", p.name);
        assert_eq!(bits(&p.ema), bits(&q.ema), "{} ema", p.name);
    }
}

#[test]
fn full_only_plan_is_dense_training() {
    let (train, _) = task();
    let full = SparsityPlan::new(vec![SparsityConfig::new("Large", vec![("fc*".into(), 0.0)]).unwrap()]).unwrap();
    let tp = train_plan(full.clone());
    let dense = pretrain(net(), &train, &tp, tp.steps).unwrap();
    let start = SuperNetwork::new(net(), full, tp.block_height, tp.adam, TrainerKind::Pretrain).unwrap();
    let dsnn = train_dsnn(&start, &train, &tp).unwrap();
    same_weights(&dense.network, &dsnn.network);
}

#[test]
fn single_sparsity_at_the_full_config_is_dense_training() {
    let (train, _) = task();
    let tp = train_plan(plan3());
    let dense = pretrain(net(), &train, &tp, tp.steps).unwrap();
    let start = SuperNetwork::new(net(), plan3(), tp.block_height, tp.adam, TrainerKind::Pretrain).unwrap();
    let single = train_single_sparsity(&start, &train, &tp, "Large").unwrap();
    same_weights(&dense.network, &single.network);
}

#[test]
fn runs_are_deterministic() {
    let (train, _) = task();
    let tp = train_plan(plan3());
    let pre = pretrain(net(), &train, &tp, 40).unwrap();
    let a = train_dsnn(&pre, &train, &tp).unwrap();
    let b = train_dsnn(&pre, &train, &tp).unwrap();
    same_weights(&a.network, &b.network);
    assert_eq!(a.masks, b.masks);
    assert_eq!(a.stored_grad, b.stored_grad);
}

fn target_of(cfg: &SparsityConfig) -> f64 {
    cfg.levels[0].1
}

#[test]
fn zero_block_count_follows_the_ramp_at_every_refresh() {
    let (train, _) = task();
    let tp = train_plan(plan3());
    let pre = pretrain(net(), &train, &tp, 40).unwrap();
    let mut refreshes = 0;
    let mut check = |net: &SuperNetwork, report: &dsnn_core::trainer::StepReport| {
        if !report.refreshed {
            return;
        }
        refreshes += 1;
        let t = report.step as f64;
        let ramp = tp.ramp_steps as f64;
        for (c, cfg) in net.plan.configs().iter().enumerate().skip(1) {
            let progress = t.min(ramp) / ramp;
            let s = target_of(cfg) * (1.0 - (1.0 - progress).powi(3));
            for m in net.masks[c].as_ref().unwrap().iter().flatten() {
                let blocks = m.block_grid().block_count() as f64;
                let exact = s * blocks;
                let zero_blocks = m.count_zero_blocks().unwrap() as f64;
                // tolerate only float ties at an integer boundary
                if (exact - exact.round()).abs() > 1e-9 {
                    assert_eq!(zero_blocks, exact.floor(), "{} at step {t}", cfg.name);
                } else {
                    assert_eq!(zero_blocks, exact.round(), "{} at step {t}", cfg.name);
                }
            }
        }
    };
    train_dsnn_with(&pre, &train, &tp, MaskPolicy::Scored, &mut check).unwrap();
    assert_eq!(refreshes, 12);
}

#[test]
fn freezing_leaves_union_weights_bit_identical() {
    let (train, _) = task();
    let mut tp = train_plan(plan3());
    tp.progressive_freezing = false;
    let pre = pretrain(net(), &train, &tp, 40).unwrap();
    let mut net = train_dsnn(&pre, &train, &tp).unwrap();
    let before = net.clone();
    let mut sampler = BatchSampler::new(train.len(), tp.batch_size, 99);
    progressive_freeze(&mut net, &train, &tp, MaskPolicy::Scored, &mut sampler).unwrap();
    let union = union_masks(&net).unwrap();
    let mut changed = 0;
    for (i, (p, q)) in before.network.params.iter().zip(&net.network.params).enumerate() {
        for k in 0..p.value.len() {
            let frozen = union[i].as_ref().is_none_or(|m: &BinaryMask| m.get(k));
            if frozen {
                assert_eq!(p.value.data()[k].to_bits(), q.value.data()[k].to_bits());
                assert_eq!(p.ema.data()[k].to_bits(), q.ema.data()[k].to_bits());
            } else if p.value.data()[k] != q.value.data()[k] {
                changed += 1;
            }
        }
    }
    assert!(changed > 0);
    // the sparse sub-networks are untouched, so their metrics are too
    let (_, eval) = task();
    let mut refreshed = before.clone();
    refreshed.masks = net.masks.clone();
    for c in ["Medium", "Small"] {
        assert_eq!(evaluate(&refreshed, c, &eval).unwrap(), evaluate(&net, c, &eval).unwrap());
    }
}

#[test]
fn freezing_keeps_trained_masks_once_the_ramp_is_done() {
    let (train, eval) = task();
    let mut tp = train_plan(plan3());
    tp.progressive_freezing = false;
    let pre = pretrain(net(), &train, &tp, 40).unwrap();
    let mut net = train_dsnn(&pre, &train, &tp).unwrap();
    let before = net.clone();
    let mut sampler = BatchSampler::new(train.len(), tp.batch_size, 99);
    progressive_freeze(&mut net, &train, &tp, MaskPolicy::Scored, &mut sampler).unwrap();
    assert_eq!(before.masks, net.masks);
    for c in ["Medium", "Small"] {
        assert_eq!(evaluate(&before, c, &eval).unwrap(), evaluate(&net, c, &eval).unwrap());
    }

    // stopped mid-ramp: masks move to their final sparsity first
    tp.steps = 12;
    let mut short = train_dsnn(&pre, &train, &tp).unwrap();
    let small = short.config_index("Small").unwrap();
    let w = short.network.index_of("fc0.w").unwrap();
    let partial = short.masks[small].as_ref().unwrap()[w].as_ref().unwrap().sparsity();
    progressive_freeze(&mut short, &train, &tp, MaskPolicy::Scored, &mut sampler).unwrap();
    let full = short.masks[small].as_ref().unwrap()[w].as_ref().unwrap().sparsity();
    assert!(partial < 0.8 && (full - 0.8).abs() < 0.05, "{partial} -> {full}");
}

/// Loss gradient of one configuration built directly from graph
/// primitives, with the teacher distribution entering as a constant.
fn manual_grads(net: &Network, masks: Option<&Vec<Option<BinaryMask>>>, inputs: &Tensor, target: Rc<Tensor>) -> Vec<Tensor> {
    let mut g = Graph::new();
    let leaves: Vec<_> = net.params.iter().map(|p| g.leaf(p.value.clone(), true)).collect();
    let weights: Vec<_> = leaves
        .iter()
        .enumerate()
        .map(|(i, &l)| match masks.and_then(|m| m[i].as_ref()) {
            Some(m) => apply_mask(&mut g, l, m).unwrap(),
            None => l,
        })
        .collect();
    let logits = net.forward(&mut g, &weights, inputs).unwrap();
    let loss = g.softmax_cross_entropy(logits, target).unwrap();
    let mut grads = g.backward(loss).unwrap();
    leaves.iter().map(|&l| grads.take(l).unwrap()).collect()
}

#[test]
fn lazy_step_accumulates_independent_config_gradients() {
    let (train, _) = task();
    let mut tp = train_plan(plan3());
    tp.mask_update_frequency = 1;
    let pre = pretrain(net(), &train, &tp, 40).unwrap();
    let mut sn = SuperNetwork::from_pretrained(&pre, &tp, TrainerKind::Dsnn).unwrap();
    let (inputs, labels) = train.batch(&(0..16).collect::<Vec<_>>());
    for step in 0..40 {
        let before = sn.network.clone();
        dsnn_train_step(&mut sn, &inputs, &labels, step, &tp, MaskPolicy::Scored).unwrap();
        if step < 35 {
            continue;
        }
        let truth = Rc::new(one_hot(&labels, 4));
        let mut g = Graph::new();
        let leaves: Vec<_> = before.params.iter().map(|p| g.constant(p.value.clone())).collect();
        let teacher_logits = before.forward(&mut g, &leaves, &inputs).unwrap();
        let teacher = Rc::new(softmax_rows(g.value(teacher_logits), 1.0).unwrap());

        let mut expected = manual_grads(&before, None, &inputs, truth);
        for c in 1..3 {
            let extra = manual_grads(&before, sn.masks[c].as_ref(), &inputs, teacher.clone());
            for (e, x) in expected.iter_mut().zip(&extra) {
                e.add_assign(x).unwrap();
            }
        }
        for (e, got) in expected.iter().zip(&sn.stored_grad) {
            for (a, b) in e.data().iter().zip(got.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn non_finite_loss_names_config_and_step() {
    let (train, _) = task();
    let tp = train_plan(plan3());
    let mut bad = net();
    bad.params[0].value.data_mut()[0] = f64::INFINITY;
    match pretrain(bad, &train, &tp, 5) {
        Err(TrainError::Diverged { config, step, .. }) => {
            assert_eq!(config, "Large");
            assert_eq!(step, 0);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn unknown_config_lists_available_names() {
    let (train, eval) = task();
    let tp = train_plan(plan3());
    let pre = pretrain(net(), &train, &tp, 40).unwrap();
    let err = evaluate(&pre, "Tiny", &eval).unwrap_err().to_string();
    assert!(err.contains("Large") && err.contains("Small"), "{err}");
}

#[test]
fn zero_pretrain_steps_keep_initial_weights() {
    let (train, _) = task();
    let tp = train_plan(plan3());
    let pre = pretrain(net(), &train, &tp, 0).unwrap();
    same_weights(&pre.network, &net());
}

fn assert_invariant(net: &SuperNetwork, step: u64, ramp: u64) {
    for (c, cfg) in net.plan.configs().iter().enumerate().skip(1) {
        let progress = step.min(ramp) as f64 / ramp as f64;
        let s = target_of(cfg) * (1.0 - (1.0 - progress).powi(3));
        for m in net.masks[c].as_ref().unwrap().iter().flatten() {
            let exact = s * m.block_grid().block_count() as f64;
            if (exact - exact.round()).abs() > 1e-9 {
                assert_eq!(m.count_zero_blocks().unwrap() as f64, exact.floor());
            }
        }
    }
}

#[test]
fn lazy_update_off_keeps_the_invariant_every_step() {
    let (train, _) = task();
    let mut tp = train_plan(plan3());
    tp.lazy_update = false;
    let pre = pretrain(net(), &train, &tp, 40).unwrap();
    let mut steps = 0;
    let mut check = |net: &SuperNetwork, report: &dsnn_core::trainer::StepReport| {
        assert!(report.refreshed);
        assert_invariant(net, report.step, tp.ramp_steps);
        steps += 1;
    };
    let off = train_dsnn_with(&pre, &train, &tp, MaskPolicy::Scored, &mut check).unwrap();
    assert_eq!(steps, tp.steps);
    tp.lazy_update = true;
    let on = train_dsnn(&pre, &train, &tp).unwrap();
    assert_ne!(off.network.params[0].value, on.network.params[0].value);
}

#[test]
fn unbounded_refresh_period_fixes_masks_after_step_zero() {
    let (train, _) = task();
    let mut tp = train_plan(plan3());
    tp.mask_update_frequency = u64::MAX;
    let pre = pretrain(net(), &train, &tp, 40).unwrap();
    let mut first = None;
    let mut check = |net: &SuperNetwork, _: &dsnn_core::trainer::StepReport| {
        let m = net.masks.clone();
        assert_eq!(first.get_or_insert_with(|| m.clone()), &m);
    };
    train_dsnn_with(&pre, &train, &tp, MaskPolicy::Scored, &mut check).unwrap();
}

#[test]
fn structured_masks_only_depend_on_the_ramp() {
    let (train, _) = task();
    let tp = train_plan(plan3());
    let pre = pretrain(net(), &train, &tp, 40).unwrap();
    let mut post_ramp = None;
    let mut check = |net: &SuperNetwork, report: &dsnn_core::trainer::StepReport| {
        if report.refreshed && report.step >= tp.ramp_steps {
            let m = net.masks.clone();
            assert_eq!(post_ramp.get_or_insert_with(|| m.clone()), &m);
        }
    };
    let snn = train_dsnn_with(&pre, &train, &tp, MaskPolicy::Structured, &mut check).unwrap();
    let small = snn.masks[2].as_ref().unwrap();
    for (i, m) in small.iter().enumerate() {
        if let Some(m) = m {
            let shape = snn.network.params[i].value.shape();
            assert_eq!(m, &dsnn_core::pruning::snn_structured_mask(shape, 0.8).unwrap());
        }
    }
}

#[test]
fn separable_two_cluster_task_converges() {
    let (train, _) = TaskSpec {
        task: TaskKind::GaussianClusters {
            dim: 64,
            classes: 2,
            noise: 0.1,
        },
        seed: 1,
        train_size: 1024,
        eval_size: 64,
    }
    .generate()
    .unwrap();
    let plan = SparsityPlan::new(vec![SparsityConfig::new("Large", vec![("fc*".into(), 0.0)]).unwrap()]).unwrap();
    let mut tp = TrainPlan::toy(plan);
    tp.batch_size = 32;
    let pre = pretrain(Network::mlp(&[64, 256, 256, 2], 4).unwrap(), &train, &tp, 2000).unwrap();
    let m = evaluate(&pre, "Large", &train).unwrap();
    assert!(m.loss < 0.1, "{m:?}");
    assert!(m.accuracy > 0.95, "{m:?}");
    assert_eq!(evaluate(&pre, "Large", &train).unwrap(), m);
}
