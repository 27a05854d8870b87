//! Seeded synthetic datasets.
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64(seed)`; Gaussian
//! draws use `rand_distr::StandardNormal`. Both are portable, so a given
//! seed produces the same samples on every platform.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset parameters: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskKind {
    GaussianClusters { dim: usize, classes: usize, noise: f64 },
    /// `noise` is the probability that a label is replaced by a uniformly
    /// drawn class.
    SymbolCount {
        seq_len: usize,
        vocab: usize,
        classes: usize,
        #[serde(default)]
        noise: f64,
    },
}

impl TaskKind {
    pub fn classes(&self) -> usize {
        match self {
            Self::GaussianClusters { classes, .. } | Self::SymbolCount { classes, .. } => *classes,
        }
    }
}

/// Everything needed to regenerate a train/eval split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// `[n × d]`; for sequence tasks each column holds a token id.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.inputs.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.width();
        &self.inputs.data()[i * d..(i + 1) * d]
    }

    /// Gathers rows as a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.width();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(vec![indices.len(), d], data).expect("non-empty batch"), labels)
    }

    fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let idx: Vec<usize> = range.collect();
        let (inputs, labels) = self.batch(&idx);
        Self {
            inputs,
            labels,
            classes: self.classes,
        }
    }

    /// Features as headerless CSV, labels one per line.
    pub fn write_csv(&self, features: &Path, labels: &Path) -> Result<(), DataError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(features)?;
        for i in 0..self.len() {
            w.write_record(self.row(i).iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(labels)?);
        for l in &self.labels {
            writeln!(out, "{l}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(features: &Path, labels: &Path, classes: usize) -> Result<Self, DataError> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(features)?;
        let mut data = Vec::new();
        let mut width = None;
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if *width.get_or_insert(rec.len()) != rec.len() {
                return Err(DataError::Parse {
                    line: line + 1,
                    msg: "ragged row".into(),
                });
            }
            for field in rec.iter() {
                data.push(field.trim().parse::<f64>().map_err(|e| DataError::Parse {
                    line: line + 1,
                    msg: e.to_string(),
                })?);
            }
        }
        let mut label_vec = Vec::new();
        for (line, l) in std::io::BufReader::new(std::fs::File::open(labels)?).lines().enumerate() {
            let l = l?;
            if l.trim().is_empty() {
                continue;
            }
            let v: usize = l.trim().parse().map_err(|e: std::num::ParseIntError| DataError::Parse {
                line: line + 1,
                msg: e.to_string(),
            })?;
            if v >= classes {
                return Err(DataError::Parse {
                    line: line + 1,
                    msg: format!("label {v} >= {classes} classes"),
                });
            }
            label_vec.push(v);
        }
        let width = width.ok_or_else(|| DataError::Invalid("empty feature file".into()))?;
        if label_vec.len() * width != data.len() {
            return Err(DataError::Invalid("feature and label counts differ".into()));
        }
        let inputs = Tensor::new(vec![label_vec.len(), width], data)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        Ok(Self {
            inputs,
            labels: label_vec,
            classes,
        })
    }
}

/// Class means drawn on the unit hypersphere, samples `mean + noise·N(0, I)`.
/// Labels are the generating class; at zero noise that is the nearest mean.
pub fn gen_gaussian_clusters(seed: u64, n: usize, classes: usize, dim: usize, noise: f64) -> Result<SyntheticDataset, DataError> {
    let means = cluster_means(seed, classes, dim, noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // skip the stream used for the means
    for _ in 0..classes * dim {
        let _: f64 = rng.sample(StandardNormal);
    }
    sample_clusters(&mut rng, &means, n, noise)
}

/// Class means used by [`gen_gaussian_clusters`] for `seed`.
pub fn cluster_means(seed: u64, classes: usize, dim: usize, noise: f64) -> Result<Vec<Vec<f64>>, DataError> {
    if classes < 2 {
        return Err(DataError::Invalid("need at least 2 classes".into()));
    }
    if !(noise >= 0.0) {
        return Err(DataError::Invalid(format!("noise must be >= 0, got {noise}")));
    }
    if dim + 1 < classes {
        return Err(DataError::Invalid(format!(
            "dim {dim} < classes - 1 = {}: means are not separable",
            classes - 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        means.push(v.into_iter().map(|x| x / norm).collect());
    }
    Ok(means)
}

fn sample_clusters(rng: &mut ChaCha8Rng, means: &[Vec<f64>], n: usize, noise: f64) -> Result<SyntheticDataset, DataError> {
    if n == 0 {
        return Err(DataError::Invalid("empty dataset".into()));
    }
    let dim = means[0].len();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..means.len());
        for &m in &means[c] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(m + noise * z);
        }
        labels.push(c);
    }
    Ok(SyntheticDataset {
        inputs: Tensor::new(vec![n, dim], data).expect("n, dim > 0"),
        labels,
        classes: means.len(),
    })
}

/// Uniform token sequences labelled by `(count of token 0) mod classes`.
pub fn gen_symbol_count(seed: u64, n: usize, seq_len: usize, vocab: usize, classes: usize) -> Result<SyntheticDataset, DataError> {
    gen_symbol_count_noisy(seed, n, seq_len, vocab, classes, 0.0)
}

/// As [`gen_symbol_count`], with each label replaced by a uniform class
/// with probability `noise`.
pub fn gen_symbol_count_noisy(
    seed: u64,
    n: usize,
    seq_len: usize,
    vocab: usize,
    classes: usize,
    noise: f64,
) -> Result<SyntheticDataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_sequences(&mut rng, n, seq_len, vocab, classes, noise, None)
}

fn check_sequence_args(n: usize, seq_len: usize, vocab: usize, classes: usize) -> Result<(), DataError> {
    if seq_len < 2 || vocab < 2 || classes < 2 || n == 0 {
        return Err(DataError::Invalid(format!(
            "symbol count needs seq_len >= 2, vocab >= 2, classes >= 2, n > 0 (got {seq_len}, {vocab}, {classes}, {n})"
        )));
    }
    Ok(())
}

fn sample_sequences(
    rng: &mut ChaCha8Rng,
    n: usize,
    seq_len: usize,
    vocab: usize,
    classes: usize,
    noise: f64,
    exclude: Option<&HashSet<Vec<u32>>>,
) -> Result<SyntheticDataset, DataError> {
    check_sequence_args(n, seq_len, vocab, classes)?;
    if !(0.0..=1.0).contains(&noise) {
        return Err(DataError::Invalid(format!("label noise must lie in [0, 1], got {noise}")));
    }
    if let Some(ex) = exclude {
        let space = (vocab as f64).powi(seq_len as i32);
        if (ex.len() + n) as f64 > space {
            return Err(DataError::Invalid("not enough distinct sequences for a disjoint split".into()));
        }
    }
    let mut data = Vec::with_capacity(n * seq_len);
    let mut labels = Vec::with_capacity(n);
    while labels.len() < n {
        let seq: Vec<u32> = (0..seq_len).map(|_| rng.random_range(0..vocab as u32)).collect();
        if exclude.is_some_and(|ex| ex.contains(&seq)) {
            continue;
        }
        let mut label = symbol_count_label(&seq, classes);
        if noise > 0.0 && rng.random::<f64>() < noise {
            label = rng.random_range(0..classes);
        }
        labels.push(label);
        data.extend(seq.iter().map(|&t| t as f64));
    }
    Ok(SyntheticDataset {
        inputs: Tensor::new(vec![n, seq_len], data).expect("n, seq_len > 0"),
        labels,
        classes,
    })
}

pub fn symbol_count_label(seq: &[u32], classes: usize) -> usize {
    seq.iter().filter(|&&t| t == 0).count() % classes
}

impl TaskSpec {
    /// Train and eval splits. Eval samples never repeat a training sequence.
    pub fn generate(&self) -> Result<(SyntheticDataset, SyntheticDataset), DataError> {
        match self.task {
            TaskKind::GaussianClusters { dim, classes, noise } => {
                let all = gen_gaussian_clusters(self.seed, self.train_size + self.eval_size, classes, dim, noise)?;
                check_split(self)?;
                Ok((
                    all.slice(0..self.train_size),
                    all.slice(self.train_size..self.train_size + self.eval_size),
                ))
            }
            TaskKind::SymbolCount {
                seq_len,
                vocab,
                classes,
                noise,
            } => {
                check_split(self)?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let train = sample_sequences(&mut rng, self.train_size, seq_len, vocab, classes, noise, None)?;
                let seen: HashSet<Vec<u32>> = (0..train.len())
                    .map(|i| train.row(i).iter().map(|&t| t as u32).collect())
                    .collect();
                let eval = sample_sequences(&mut rng, self.eval_size, seq_len, vocab, classes, noise, Some(&seen))?;
                Ok((train, eval))
            }
        }
    }
}

fn check_split(spec: &TaskSpec) -> Result<(), DataError> {
    if spec.train_size == 0 || spec.eval_size == 0 {
        return Err(DataError::Invalid("train and eval sizes must be positive".into()));
    }
    Ok(())
}

/// Epoch-shuffled mini-batch indices; the sequence depends only on the seed.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c),
            order: (0..len).collect(),
            cursor: len,
            batch_size: batch_size.min(len).max(1),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.order.len() {
            self.reshuffle();
        }
        let out = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        out
    }
}

/// One-hot `[n × classes]` targets.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = 1.0;
    }
    t
}
