//! On-disk checkpoints: a JSON manifest plus raw little-endian payloads.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/tensors/p{i}.{value,ema,grad,adam_m,adam_v}.f64
//! <dir>/masks/c{c}_p{i}.mask
//! <dir>/sparse/c{c}_p{i}.bsr        block-CSR export of the EMA weights
//! ```
//!
//! Every payload's SHA-256 is recorded in the manifest, and
//! `payload_sha256` hashes the ordered list of `(path, digest)` pairs.
//! Wall-clock timings are not stored, so identical runs produce identical
//! bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::TaskSpec;
use crate::model::{Architecture, Network, Parameter};
use crate::optim::{AdamConfig, AdamState, OptimError};
use crate::pruning::{BinaryMask, PruningError, SparsityPlan};
use crate::sparse::{BlockCsrMatrix, SparseError, ValueWidth};
use crate::tensor::Tensor;
use crate::trainer::{MaskSet, MetricRecord, SuperNetwork, TrainPlan, TrainerKind};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checksum mismatch for {0}")]
    Checksum(String),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Pruning(#[from] PruningError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Run context stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: Option<TaskSpec>,
    pub train: Option<TrainPlan>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileRef {
    path: String,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    value: FileRef,
    ema: FileRef,
    grad: FileRef,
    adam_m: FileRef,
    adam_v: FileRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MaskEntry {
    config: String,
    weight: String,
    mask: FileRef,
    sparse: FileRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    label: String,
    trainer: TrainerKind,
    arch: Architecture,
    min_prunable_elements: usize,
    plan: SparsityPlan,
    block_height: usize,
    step: u64,
    adam: AdamConfig,
    adam_step: u64,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
    /// Configurations with stored masks, in plan order.
    configs: Vec<String>,
    masks: Vec<MaskEntry>,
    history: Vec<MetricRecord>,
    payload_sha256: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn tensor_from_bytes(bytes: &[u8], shape: &[usize], path: &str) -> Result<Tensor, CheckpointError> {
    if bytes.len() % 8 != 0 {
        return Err(CheckpointError::Malformed(format!("{path}: length is not a multiple of 8")));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape.to_vec(), data).map_err(|e| CheckpointError::Malformed(format!("{path}: {e}")))
}

struct Writer<'a> {
    root: &'a Path,
}

impl Writer<'_> {
    fn put(&self, rel: String, bytes: &[u8]) -> Result<FileRef, CheckpointError> {
        let path = self.root.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
        Ok(FileRef {
            path: rel,
            sha256: sha_hex(bytes),
        })
    }
}

fn payload_hash<'a>(refs: impl Iterator<Item = &'a FileRef>) -> String {
    let mut h = Sha256::new();
    for r in refs {
        h.update(r.path.as_bytes());
        h.update([0]);
        h.update(r.sha256.as_bytes());
        h.update([b'\n']);
    }
    hex::encode(h.finalize())
}

fn all_refs(tensors: &[TensorEntry], masks: &[MaskEntry]) -> Vec<FileRef> {
    let mut refs = Vec::new();
    for t in tensors {
        refs.extend([&t.value, &t.ema, &t.grad, &t.adam_m, &t.adam_v].into_iter().cloned());
    }
    for m in masks {
        refs.extend([m.mask.clone(), m.sparse.clone()]);
    }
    refs
}

/// Writes `net` into `dir` (created if needed); returns the payload hash.
pub fn save_checkpoint(dir: &Path, net: &SuperNetwork, meta: &CheckpointMeta) -> Result<String, CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let w = Writer { root: dir };
    let mut tensors = Vec::with_capacity(net.network.params.len());
    for (i, p) in net.network.params.iter().enumerate() {
        let (m, v) = net.adam.moments(i);
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            value: w.put(format!("tensors/p{i}.value.f64"), &tensor_bytes(&p.value))?,
            ema: w.put(format!("tensors/p{i}.ema.f64"), &tensor_bytes(&p.ema))?,
            grad: w.put(format!("tensors/p{i}.grad.f64"), &tensor_bytes(&net.stored_grad[i]))?,
            adam_m: w.put(format!("tensors/p{i}.adam_m.f64"), &tensor_bytes(m))?,
            adam_v: w.put(format!("tensors/p{i}.adam_v.f64"), &tensor_bytes(v))?,
        });
    }
    let mut configs = Vec::new();
    let mut masks = Vec::new();
    for (c, set) in net.masks.iter().enumerate() {
        let Some(set) = set else { continue };
        let config = net.plan.configs()[c].name.clone();
        configs.push(config.clone());
        for (i, mask) in set.iter().enumerate() {
            let Some(mask) = mask else { continue };
            let bsr = BlockCsrMatrix::from_masked_dense(&net.network.params[i].ema, mask)?;
            masks.push(MaskEntry {
                config: config.clone(),
                weight: net.network.params[i].name.clone(),
                mask: w.put(format!("masks/c{c}_p{i}.mask"), &mask.to_bytes()?)?,
                sparse: w.put(format!("sparse/c{c}_p{i}.bsr"), &bsr.to_bytes(ValueWidth::F64))?,
            });
        }
    }
    let payload_sha256 = payload_hash(all_refs(&tensors, &masks).iter());
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        label: net.label.clone(),
        trainer: net.kind.clone(),
        arch: net.network.arch.clone(),
        min_prunable_elements: net.network.min_prunable_elements,
        plan: net.plan.clone(),
        block_height: net.block_height,
        step: net.step,
        adam: net.adam.config,
        adam_step: net.adam.step_count(),
        meta: meta.clone(),
        tensors,
        configs,
        masks,
        history: net.history.clone(),
        payload_sha256: payload_sha256.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(payload_sha256)
}

fn read_checked(dir: &Path, r: &FileRef) -> Result<Vec<u8>, CheckpointError> {
    let path = dir.join(&r.path);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if sha_hex(&bytes) != r.sha256 {
        return Err(CheckpointError::Checksum(r.path.clone()));
    }
    Ok(bytes)
}

/// Loads and verifies a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(SuperNetwork, CheckpointMeta), CheckpointError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(m.format_version));
    }
    if payload_hash(all_refs(&m.tensors, &m.masks).iter()) != m.payload_sha256 {
        return Err(CheckpointError::Checksum("payload_sha256".into()));
    }
    let plan = SparsityPlan::new(m.plan.configs().to_vec())?;

    let mut params = Vec::with_capacity(m.tensors.len());
    let (mut grads, mut first, mut second) = (Vec::new(), Vec::new(), Vec::new());
    for t in &m.tensors {
        let load = |r: &FileRef| tensor_from_bytes(&read_checked(dir, r)?, &t.shape, &r.path);
        let mut p = Parameter::new(t.name.clone(), load(&t.value)?);
        p.ema = load(&t.ema)?;
        params.push(p);
        grads.push(load(&t.grad)?);
        first.push(load(&t.adam_m)?);
        second.push(load(&t.adam_v)?);
    }
    let network = Network {
        arch: m.arch,
        params,
        min_prunable_elements: m.min_prunable_elements,
    };
    let expected = Network::new(network.arch.clone(), 0)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let layout_ok = expected.params.len() == network.params.len()
        && expected
            .params
            .iter()
            .zip(&network.params)
            .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
    if !layout_ok {
        return Err(CheckpointError::Malformed("tensor layout does not match the architecture".into()));
    }

    let mut masks: Vec<Option<MaskSet>> = vec![None; plan.len()];
    for name in &m.configs {
        let c = plan
            .index_of(name)
            .ok_or_else(|| CheckpointError::Malformed(format!("unknown config {name}")))?;
        masks[c] = Some(vec![None; network.params.len()]);
    }
    for e in &m.masks {
        let bad = || CheckpointError::Malformed(format!("mask entry {}/{}", e.config, e.weight));
        let c = plan.index_of(&e.config).ok_or_else(bad)?;
        let i = network.index_of(&e.weight).ok_or_else(bad)?;
        let mask = BinaryMask::from_bytes(&read_checked(dir, &e.mask)?)?;
        if mask.shape() != network.params[i].value.shape() {
            return Err(bad());
        }
        read_checked(dir, &e.sparse)?;
        masks[c].as_mut().ok_or_else(bad)?[i] = Some(mask);
    }

    let adam = AdamState::from_parts(m.adam, m.adam_step, first, second)?;
    let net = SuperNetwork {
        network,
        plan,
        block_height: m.block_height,
        masks,
        stored_grad: grads,
        adam,
        step: m.step,
        kind: m.trainer,
        label: m.label,
        history: m.history,
    };
    Ok((net, m.meta))
}

/// Reads the block-CSR export of `weight` under `config`.
pub fn load_sparse_export(dir: &Path, config: &str, weight: &str) -> Result<BlockCsrMatrix, CheckpointError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: Manifest = serde_json::from_str(&text)?;
    let e = m
        .masks
        .iter()
        .find(|e| e.config == config && e.weight == weight)
        .ok_or_else(|| CheckpointError::Malformed(format!("no export for {config}/{weight}")))?;
    Ok(BlockCsrMatrix::from_bytes(&read_checked(dir, &e.sparse)?)?)
}
