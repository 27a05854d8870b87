//! Experiment configuration files.
//!
//! One `key = value` pair per line, `#` starts a comment, keys are dotted
//! (`task.kind`, `train.lr`, `plan.Small`). Unknown and repeated keys are
//! errors. The grammar is documented in `docs/config.md`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dsnn_core::data::{TaskKind, TaskSpec};
use dsnn_core::model::{Architecture, Network};
use dsnn_core::pruning::{build_toy_plan, SparsityConfig, SparsityPlan};
use dsnn_core::trainer::TrainPlan;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` is set twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: {key}: {message}")]
    Value { line: usize, key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskName {
    Clusters,
    SymbolCount,
}

impl TaskName {
    fn as_str(self) -> &'static str {
        match self {
            Self::Clusters => "clusters",
            Self::SymbolCount => "symbol-count",
        }
    }

    fn default_noise(self) -> f64 {
        match self {
            Self::Clusters => 0.5,
            Self::SymbolCount => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub kind: TaskName,
    pub train_size: usize,
    pub eval_size: usize,
    pub classes: usize,
    /// Feature width of the cluster task.
    pub dim: usize,
    pub seq_len: usize,
    pub vocab: usize,
    /// Cluster standard deviation, or the label-flip probability of the
    /// symbol-count task.
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Lstm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub mlp_hidden: Vec<usize>,
    pub hidden: usize,
    pub projection: usize,
    pub layers: usize,
    pub min_prunable_elements: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Seeds data generation, initialisation and batch sampling.
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub pretrain_steps: u64,
    /// `train.plan` holds the sparsity plan; `train.seed` mirrors `seed`.
    pub train: TrainPlan,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig {
            kind: ModelKind::Mlp,
            mlp_hidden: vec![256, 256],
            hidden: 128,
            projection: 32,
            layers: 1,
            min_prunable_elements: 0,
        };
        let plan = default_plan(&model);
        Self {
            seed: 0,
            task: TaskConfig {
                kind: TaskName::Clusters,
                train_size: 2000,
                eval_size: 500,
                classes: 4,
                dim: 64,
                seq_len: 12,
                vocab: 4,
                noise: TaskName::Clusters.default_noise(),
            },
            model,
            pretrain_steps: 2000,
            train: TrainPlan::toy(plan),
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// The three-level plan for `model`. For the LSTM the recurrent weights
/// form one class and the projection/output weights the other; for the
/// MLP the hidden layers and the output layer play those roles.
pub fn default_plan(model: &ModelConfig) -> SparsityPlan {
    match model.kind {
        ModelKind::Lstm => build_toy_plan(),
        ModelKind::Mlp => {
            let n = model.mlp_hidden.len();
            let hidden = (0..n).map(|i| format!("fc{i}.*")).collect::<Vec<_>>().join("|");
            let output = format!("fc{n}.*");
            let cfg = |name: &str, h: f64, o: f64| {
                let mut levels = Vec::new();
                if n > 0 {
                    levels.push((hidden.clone(), h));
                }
                levels.push((output.clone(), o));
                SparsityConfig::new(name, levels).expect("levels are in range")
            };
            SparsityPlan::new(vec![cfg("Large", 0.0, 0.0), cfg("Medium", 0.70, 0.0), cfg("Small", 0.90, 0.50)])
                .expect("Large is dense")
        }
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("`{v}`: {e}"))
}

fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

/// `pattern:level, pattern:level`
fn parse_levels(name: &str, v: &str) -> Result<SparsityConfig, String> {
    let mut levels = Vec::new();
    for part in v.split(',') {
        let (pattern, level) = part
            .trim()
            .rsplit_once(':')
            .ok_or_else(|| format!("expected `pattern:level`, got `{}`", part.trim()))?;
        if pattern.trim().is_empty() {
            return Err("empty weight pattern".into());
        }
        levels.push((pattern.trim().to_string(), parse_num(level.trim())?));
    }
    SparsityConfig::new(name, levels).map_err(|e| e.to_string())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_with(&text, &[])
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with(text, &[])
    }

    /// Parses `text`, then applies `overrides` (`key=value` strings), which
    /// may replace keys set in the file.
    pub fn parse_with(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        let mut plan: Vec<SparsityConfig> = Vec::new();
        let mut noise_set = false;
        let file_lines = text.lines().enumerate().map(|(i, l)| (i + 1, l, false));
        let extra = overrides.iter().map(|l| (0, l.as_str(), true));
        for (line, raw, is_override) in file_lines.chain(extra) {
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            if seen.iter().any(|k| k == key) && !is_override {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            seen.push(key.to_string());
            let value_err = |message: String| ConfigError::Value {
                line,
                key: key.to_string(),
                message,
            };
            if let Some(name) = key.strip_prefix("plan.") {
                let c = parse_levels(name, value).map_err(value_err)?;
                match plan.iter_mut().find(|p| p.name == c.name) {
                    Some(slot) => *slot = c,
                    None => plan.push(c),
                }
                continue;
            }
            if key == "task.noise" {
                noise_set = true;
            }
            match cfg.set(key, value) {
                Ok(true) => {}
                Ok(false) => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
                Err(m) => return Err(value_err(m)),
            }
        }
        if !noise_set {
            cfg.task.noise = cfg.task.kind.default_noise();
        }
        cfg.train.seed = cfg.seed;
        cfg.train.plan = if plan.is_empty() {
            default_plan(&cfg.model)
        } else {
            SparsityPlan::new(plan).map_err(|e| ConfigError::Invalid(e.to_string()))?
        };
        Ok(cfg)
    }

    /// Sets one scalar key; `Ok(false)` for unknown keys.
    fn set(&mut self, key: &str, v: &str) -> Result<bool, String> {
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse_num(v)?,
            "task.kind" => {
                self.task.kind = match v {
                    "clusters" => TaskName::Clusters,
                    "symbol-count" => TaskName::SymbolCount,
                    _ => return Err(format!("expected clusters or symbol-count, got `{v}`")),
                }
            }
            "task.train_size" => self.task.train_size = parse_num(v)?,
            "task.eval_size" => self.task.eval_size = parse_num(v)?,
            "task.classes" => self.task.classes = parse_num(v)?,
            "task.dim" => self.task.dim = parse_num(v)?,
            "task.seq_len" => self.task.seq_len = parse_num(v)?,
            "task.vocab" => self.task.vocab = parse_num(v)?,
            "task.noise" => self.task.noise = parse_num(v)?,
            "model.kind" => {
                self.model.kind = match v {
                    "mlp" => ModelKind::Mlp,
                    "lstm" => ModelKind::Lstm,
                    _ => return Err(format!("expected mlp or lstm, got `{v}`")),
                }
            }
            "model.mlp_hidden" => self.model.mlp_hidden = parse_list(v)?,
            "model.hidden" => self.model.hidden = parse_num(v)?,
            "model.projection" => self.model.projection = parse_num(v)?,
            "model.layers" => self.model.layers = parse_num(v)?,
            "model.min_prunable_elements" => self.model.min_prunable_elements = parse_num(v)?,
            "train.pretrain_steps" => self.pretrain_steps = parse_num(v)?,
            "train.steps" => t.steps = parse_num(v)?,
            "train.freeze_steps" => t.freeze_steps = parse_num(v)?,
            "train.mask_update_frequency" => t.mask_update_frequency = parse_num(v)?,
            "train.ramp_steps" => t.ramp_steps = parse_num(v)?,
            "train.block_height" => t.block_height = parse_num(v)?,
            "train.batch_size" => t.batch_size = parse_num(v)?,
            "train.lr" => t.adam.lr = parse_num(v)?,
            "train.beta1" => t.adam.beta1 = parse_num(v)?,
            "train.beta2" => t.adam.beta2 = parse_num(v)?,
            "train.eps" => t.adam.eps = parse_num(v)?,
            "train.warmup_steps" => t.adam.warmup_steps = parse_num(v)?,
            "train.ema_decay" => t.ema_decay = parse_num(v)?,
            "train.distillation" => t.distillation = parse_bool(v)?,
            "train.lazy_update" => t.lazy_update = parse_bool(v)?,
            "train.progressive_freezing" => t.progressive_freezing = parse_bool(v)?,
            "train.temperature" => t.temperature = parse_num(v)?,
            "train.ground_truth_mix" => t.ground_truth_mix = parse_num(v)?,
            "train.log_every" => t.log_every = parse_num(v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every key with its current value, in a form `parse` reads back to
    /// an equal config.
    pub fn dump(&self) -> String {
        let t = &self.train;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("task.kind", self.task.kind.as_str().into());
        kv("task.train_size", self.task.train_size.to_string());
        kv("task.eval_size", self.task.eval_size.to_string());
        kv("task.classes", self.task.classes.to_string());
        kv("task.dim", self.task.dim.to_string());
        kv("task.seq_len", self.task.seq_len.to_string());
        kv("task.vocab", self.task.vocab.to_string());
        kv("task.noise", self.task.noise.to_string());
        let model = match self.model.kind {
            ModelKind::Mlp => "mlp",
            ModelKind::Lstm => "lstm",
        };
        kv("model.kind", model.into());
        kv("model.mlp_hidden", list(&self.model.mlp_hidden));
        kv("model.hidden", self.model.hidden.to_string());
        kv("model.projection", self.model.projection.to_string());
        kv("model.layers", self.model.layers.to_string());
        kv("model.min_prunable_elements", self.model.min_prunable_elements.to_string());
        kv("train.pretrain_steps", self.pretrain_steps.to_string());
        kv("train.steps", t.steps.to_string());
        kv("train.freeze_steps", t.freeze_steps.to_string());
        kv("train.mask_update_frequency", t.mask_update_frequency.to_string());
        kv("train.ramp_steps", t.ramp_steps.to_string());
        kv("train.block_height", t.block_height.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", t.adam.lr.to_string());
        kv("train.beta1", t.adam.beta1.to_string());
        kv("train.beta2", t.adam.beta2.to_string());
        kv("train.eps", t.adam.eps.to_string());
        kv("train.warmup_steps", t.adam.warmup_steps.to_string());
        kv("train.ema_decay", t.ema_decay.to_string());
        kv("train.distillation", t.distillation.to_string());
        kv("train.lazy_update", t.lazy_update.to_string());
        kv("train.progressive_freezing", t.progressive_freezing.to_string());
        kv("train.temperature", t.temperature.to_string());
        kv("train.ground_truth_mix", t.ground_truth_mix.to_string());
        kv("train.log_every", t.log_every.to_string());
        for c in t.plan.configs() {
            let levels: Vec<String> = c.levels.iter().map(|(p, l)| format!("{p}:{l}")).collect();
            kv(&format!("plan.{}", c.name), levels.join(", "));
        }
        kv("output.dir", self.output_dir.display().to_string());
        s
    }

    pub fn task_spec(&self) -> TaskSpec {
        let t = &self.task;
        let task = match t.kind {
            TaskName::Clusters => TaskKind::GaussianClusters {
                dim: t.dim,
                classes: t.classes,
                noise: t.noise,
            },
            TaskName::SymbolCount => TaskKind::SymbolCount {
                seq_len: t.seq_len,
                vocab: t.vocab,
                classes: t.classes,
                noise: t.noise,
            },
        };
        TaskSpec {
            task,
            seed: self.seed,
            train_size: t.train_size,
            eval_size: t.eval_size,
        }
    }

    pub fn architecture(&self) -> Architecture {
        let (m, t) = (&self.model, &self.task);
        match m.kind {
            ModelKind::Mlp => {
                let mut dims = vec![t.dim];
                dims.extend(&m.mlp_hidden);
                dims.push(t.classes);
                Architecture::Mlp { dims }
            }
            ModelKind::Lstm => Architecture::Lstm {
                vocab: t.vocab,
                hidden: m.hidden,
                projection: m.projection,
                layers: m.layers,
                classes: t.classes,
            },
        }
    }

    /// A freshly initialised network for this config.
    pub fn build_network(&self) -> Result<Network, ConfigError> {
        let mut net = Network::new(self.architecture(), self.seed).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        net.min_prunable_elements = self.model.min_prunable_elements;
        Ok(net)
    }

    /// Cross-field checks: model/task pairing, plan coverage and training
    /// hyperparameters.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        match (self.task.kind, self.model.kind) {
            (TaskName::Clusters, ModelKind::Mlp) | (TaskName::SymbolCount, ModelKind::Lstm) => {}
            (task, _) => {
                return Err(invalid(format!(
                    "task {} needs model {}",
                    task.as_str(),
                    if task == TaskName::Clusters { "mlp" } else { "lstm" }
                )))
            }
        }
        if self.task.train_size == 0 || self.task.eval_size == 0 {
            return Err(invalid("task sizes must be positive".into()));
        }
        let net = self.build_network()?;
        self.train
            .plan
            .validate(&net.prunable_names())
            .map_err(|e| invalid(e.to_string()))?;
        self.train.validate().map_err(|e| invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_parses_back_to_the_same_config() {
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&d.dump()).unwrap(), d);

        let text = "seed = 7\ntask.kind = symbol-count\nmodel.kind = lstm\ntrain.lr = 0.0123\n\
                    plan.Full = lstm*:0, fc*|proj*|out*:0\nplan.Thin = lstm*:0.3, fc*|proj*|out*:0.25\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(ExperimentConfig::parse(&c.dump()).unwrap(), c);
        assert_eq!(c.train.plan.names(), vec!["Full", "Thin"]);
        assert_eq!(c.train.seed, 7);
        c.validate().unwrap();
    }

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let c = ExperimentConfig::parse("# header\n\n  seed = 3   # trailing\n").unwrap();
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::parse("seed = 1\ntrain.lerning_rate = 0.1\n").unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey { line: 2, ref key } if key == "train.lerning_rate"));
    }

    #[test]
    fn repeated_keys_are_rejected_but_overrides_win() {
        assert!(matches!(
            ExperimentConfig::parse("seed = 1\nseed = 2\n"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        let c = ExperimentConfig::parse_with("seed = 1\n", &["seed=5".into()]).unwrap();
        assert_eq!(c.seed, 5);
    }

    #[test]
    fn bad_values_name_the_key() {
        let e = ExperimentConfig::parse("train.lazy_update = yes\n").unwrap_err();
        assert!(e.to_string().contains("train.lazy_update"), "{e}");
        assert!(ExperimentConfig::parse("just words\n").is_err());
        assert!(ExperimentConfig::parse("plan.X = lstm*\n").is_err());
    }

    #[test]
    fn noise_default_follows_the_task() {
        let c = ExperimentConfig::parse("task.kind = symbol-count\nmodel.kind = lstm\n").unwrap();
        assert_eq!(c.task.noise, 0.0);
        assert_eq!(ExperimentConfig::default().task.noise, 0.5);
    }

    #[test]
    fn mlp_default_plan_splits_hidden_and_output() {
        let c = ExperimentConfig::default();
        let small = &c.train.plan.configs()[2];
        assert_eq!(small.level_for("fc0.w").unwrap(), 0.9);
        assert_eq!(small.level_for("fc1.w").unwrap(), 0.9);
        assert_eq!(small.level_for("fc2.w").unwrap(), 0.5);
    }

    #[test]
    fn mismatched_task_and_model_are_rejected() {
        let c = ExperimentConfig::parse("model.kind = lstm\n").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("needs model mlp"));
    }
}
