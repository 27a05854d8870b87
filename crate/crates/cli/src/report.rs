//! Comparison tables: one row per (configuration, checkpoint), laid out as
//! Type / Sparsity / Model columns followed by the eval metrics.

use std::io::Write;

use dsnn_core::checkpoint::CheckpointMeta;
use dsnn_core::data::SyntheticDataset;
use dsnn_core::trainer::{evaluate, SuperNetwork, TrainPlan, TrainerKind};

use crate::CliError;

pub const COMPARE_HEADER: [&str; 5] = ["type", "sparsity", "model", "loss", "accuracy"];

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    /// Configuration name.
    pub config: String,
    /// Realized global sparsity of the evaluated masks.
    pub sparsity: f64,
    pub model: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// Name of an ablation row from the flags it was trained with.
pub fn ablation_label(train: &TrainPlan) -> String {
    let flags = (train.lazy_update, train.distillation, train.progressive_freezing);
    match flags {
        (false, false, false) => "Baseline DSNN".into(),
        (true, false, false) => "+ Lazy Update".into(),
        (true, true, false) => "+ In-Place Distillation".into(),
        (true, true, true) => "+ Progressive Freezing".into(),
        (lazy, distill, freeze) => format!("DSNN (lazy={lazy}, distillation={distill}, freezing={freeze})"),
    }
}

/// The incremental ablation grid built on `base`: everything off, then
/// lazy update, in-place distillation and progressive freezing switched on
/// one after another.
pub fn ablation_grid(base: &TrainPlan) -> Vec<TrainPlan> {
    let with = |lazy, distill, freeze| {
        let mut t = base.clone();
        t.lazy_update = lazy;
        t.distillation = distill;
        t.progressive_freezing = freeze;
        t
    };
    vec![
        with(false, false, false),
        with(true, false, false),
        with(true, true, false),
        with(true, true, true),
    ]
}

/// Configurations a checkpoint is meant to be evaluated at.
fn evaluated_configs(net: &SuperNetwork) -> Vec<String> {
    match &net.kind {
        TrainerKind::Single { config } => vec![config.clone()],
        TrainerKind::Pretrain => vec![net.plan.configs()[0].name.clone()],
        TrainerKind::Dsnn | TrainerKind::Snn => net.available_configs().iter().map(|s| s.to_string()).collect(),
    }
}

/// Evaluates every checkpoint on `eval` and orders rows by configuration,
/// then by checkpoint order. In ablation mode each checkpoint must be a
/// DSNN run with stored hyperparameters, and rows are named by its flags.
pub fn compare_rows(
    runs: &[(SuperNetwork, CheckpointMeta)],
    eval: &SyntheticDataset,
    ablation: bool,
) -> Result<Vec<CompareRow>, CliError> {
    let Some((first, _)) = runs.first() else {
        return Err(CliError::Incompatible("nothing to compare".into()));
    };
    for (net, _) in runs {
        if net.plan != first.plan {
            return Err(CliError::Incompatible(format!(
                "plans differ: [{}] vs [{}]",
                first.plan.names().join(", "),
                net.plan.names().join(", ")
            )));
        }
    }
    let mut rows = Vec::new();
    for config in first.plan.names() {
        let c = first.config_index(config)?;
        for (net, meta) in runs {
            if !evaluated_configs(net).iter().any(|n| n == config) {
                continue;
            }
            let model = if ablation {
                if net.kind != TrainerKind::Dsnn {
                    return Err(CliError::Incompatible(format!("ablation rows need DSNN checkpoints, got {}", net.label)));
                }
                let train = meta
                    .train
                    .as_ref()
                    .ok_or_else(|| CliError::Incompatible(format!("{} has no stored hyperparameters", net.label)))?;
                ablation_label(train)
            } else {
                net.label.clone()
            };
            let m = evaluate(net, config, eval)?;
            rows.push(CompareRow {
                config: config.to_string(),
                sparsity: net.realized_sparsity(c)?,
                model,
                loss: m.loss,
                accuracy: m.accuracy,
            });
        }
    }
    Ok(rows)
}

pub fn write_compare_csv<W: Write>(out: W, rows: &[CompareRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMPARE_HEADER)?;
    for r in rows {
        w.write_record([
            r.config.clone(),
            format!("{:.4}", r.sparsity),
            r.model.clone(),
            format!("{:.6}", r.loss),
            format!("{:.4}", r.accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Markdown table; the type and sparsity cells are printed once per group.
pub fn compare_markdown(rows: &[CompareRow]) -> String {
    let mut s = String::from("| Type | Sparsity | Model | Loss | Accuracy |\n|---|---:|---|---:|---:|\n");
    let mut last: Option<&str> = None;
    for r in rows {
        let (ty, sp) = if last == Some(r.config.as_str()) {
            (String::new(), String::new())
        } else {
            (r.config.clone(), format!("{:.0}%", 100.0 * r.sparsity))
        };
        last = Some(&r.config);
        s.push_str(&format!("| {ty} | {sp} | {} | {:.4} | {:.4} |\n", r.model, r.loss, r.accuracy));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use dsnn_core::pruning::build_toy_plan;

    fn row(config: &str, model: &str) -> CompareRow {
        CompareRow {
            config: config.into(),
            sparsity: 0.683,
            model: model.into(),
            loss: 0.25,
            accuracy: 0.9,
        }
    }

    #[test]
    fn ablation_labels_follow_the_grid() {
        let labels: Vec<String> = ablation_grid(&TrainPlan::toy(build_toy_plan())).iter().map(ablation_label).collect();
        assert_eq!(
            labels,
            ["Baseline DSNN", "+ Lazy Update", "+ In-Place Distillation", "+ Progressive Freezing"]
        );
    }

    #[test]
    fn markdown_groups_rows_by_type() {
        let md = compare_markdown(&[row("Medium", "Single_M"), row("Medium", "DSNN")]);
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines[2], "| Medium | 68% | Single_M | 0.2500 | 0.9000 |");
        assert_eq!(lines[3], "|  |  | DSNN | 0.2500 | 0.9000 |");
    }

    #[test]
    fn csv_has_the_frozen_header() {
        let mut out = Vec::new();
        write_compare_csv(&mut out, &[row("Small", "SNN")]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "type,sparsity,model,loss,accuracy\nSmall,0.6830,SNN,0.250000,0.9000\n");
    }
}
