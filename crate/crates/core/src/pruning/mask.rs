use std::rc::Rc;

use crate::autodiff::{AutodiffError, Graph, NodeId};
use crate::tensor::{Tensor, TensorError};

use super::PruningError;

/// Bit-packed keep/prune mask over a weight.
///
/// Masks over 2-D weights are organised in `R×1` blocks: `R` consecutive
/// rows of one column. A 1-D weight of length `m` is treated as `m×1`.
/// Block `(br, col)` has flat block index `br·cols + col`.
///
/// ```text
///   col:   0   1   2
///        +---+---+---+   rows 0..R   (block-row 0)
///        | b0| b1| b2|
///        +---+---+---+   rows R..2R  (block-row 1)
///        | b3| b4| b5|
///        +---+---+---+
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    block_height: usize,
    len: usize,
    words: Vec<u64>,
}

impl BinaryMask {
    pub fn ones(shape: &[usize], block_height: usize) -> Self {
        let len: usize = shape.iter().product();
        let mut words = vec![u64::MAX; len.div_ceil(64)];
        if len % 64 != 0 {
            if let Some(last) = words.last_mut() {
                *last = (1u64 << (len % 64)) - 1;
            }
        }
        Self {
            shape: shape.to_vec(),
            block_height,
            len,
            words,
        }
    }

    pub fn zeros(shape: &[usize], block_height: usize) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            block_height,
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_bools(shape: &[usize], block_height: usize, kept: &[bool]) -> Result<Self, PruningError> {
        let mut mask = Self::zeros(shape, block_height);
        if kept.len() != mask.len {
            return Err(PruningError::ShapeMismatch {
                expected: shape.to_vec(),
                got: vec![kept.len()],
            });
        }
        for (i, &k) in kept.iter().enumerate() {
            mask.set(i, k);
        }
        Ok(mask)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn block_height(&self) -> usize {
        self.block_height
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, index: usize) -> bool {
        (self.words[index / 64] >> (index % 64)) & 1 == 1
    }

    pub fn set(&mut self, index: usize, kept: bool) {
        let bit = 1u64 << (index % 64);
        if kept {
            self.words[index / 64] |= bit;
        } else {
            self.words[index / 64] &= !bit;
        }
    }

    pub fn count_kept(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn count_zeros(&self) -> usize {
        self.len - self.count_kept()
    }

    /// Fraction of pruned entries.
    pub fn sparsity(&self) -> f64 {
        self.count_zeros() as f64 / self.len as f64
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(|i| self.get(i))
    }

    /// `(rows, cols)` of the 2-D view used for blocking.
    pub fn matrix_dims(&self) -> (usize, usize) {
        matrix_dims(&self.shape)
    }

    pub fn block_grid(&self) -> BlockGrid {
        let (rows, cols) = self.matrix_dims();
        BlockGrid::new(rows, cols, self.block_height)
    }

    /// Zero-block count, checking block alignment on the way.
    pub fn count_zero_blocks(&self) -> Result<usize, PruningError> {
        let grid = self.block_grid();
        let mut zeros = 0;
        for b in 0..grid.block_count() {
            let (br, col) = (b / grid.cols, b % grid.cols);
            let mut rows = grid.row_range(br);
            let kept = self.get(rows.next().unwrap() * grid.cols + col);
            if rows.any(|r| self.get(r * grid.cols + col) != kept) {
                return Err(PruningError::NotBlockAligned { block: b });
            }
            if !kept {
                zeros += 1;
            }
        }
        Ok(zeros)
    }

    pub fn is_block_aligned(&self) -> bool {
        self.count_zero_blocks().is_ok()
    }

    /// 0/1 multiplier tensor with the mask's shape.
    pub fn multiplier(&self) -> Tensor {
        let data = self.iter().map(|k| if k { 1.0 } else { 0.0 }).collect();
        Tensor::new(self.shape.clone(), data).expect("mask shape is valid")
    }

    pub fn complement(&self) -> Self {
        let mut out = self.clone();
        for w in &mut out.words {
            *w = !*w;
        }
        if self.len % 64 != 0 {
            if let Some(last) = out.words.last_mut() {
                *last &= (1u64 << (self.len % 64)) - 1;
            }
        }
        out
    }

    /// Zero set of `self` contained in that of `other`.
    pub fn zeros_subset_of(&self, other: &BinaryMask) -> bool {
        self.words
            .iter()
            .zip(&other.words)
            .all(|(a, b)| (!a & b) == 0)
    }

    /// Serialized form: a 16-byte little-endian header
    /// `[ndim: u32][block_height: u32][dim0: u32][dim1: u32]` followed by
    /// `ceil(len/8)` bytes, element `k` at bit `k % 8` of byte `k / 8`.
    /// `dim1` is 0 for 1-D masks.
    pub fn to_bytes(&self) -> Result<Vec<u8>, PruningError> {
        if self.shape.is_empty() || self.shape.len() > 2 {
            return Err(PruningError::UnsupportedRank(self.shape.len()));
        }
        let mut out = Vec::with_capacity(16 + self.len.div_ceil(8));
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.block_height as u32).to_le_bytes());
        out.extend_from_slice(&(self.shape[0] as u32).to_le_bytes());
        out.extend_from_slice(&(self.shape.get(1).copied().unwrap_or(0) as u32).to_le_bytes());
        let bytes: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.extend_from_slice(&bytes[..self.len.div_ceil(8)]);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PruningError> {
        if bytes.len() < 16 {
            return Err(PruningError::Corrupt("mask header truncated".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let (ndim, block_height, d0, d1) = (word(0), word(1), word(2), word(3));
        let shape = match ndim {
            1 => vec![d0],
            2 => vec![d0, d1],
            n => return Err(PruningError::UnsupportedRank(n)),
        };
        if shape.iter().any(|&d| d == 0) || block_height == 0 {
            return Err(PruningError::Corrupt("zero dimension in mask header".into()));
        }
        let mut mask = Self::zeros(&shape, block_height);
        let payload = &bytes[16..];
        if payload.len() != mask.len.div_ceil(8) {
            return Err(PruningError::Corrupt(format!(
                "mask payload has {} bytes, expected {}",
                payload.len(),
                mask.len.div_ceil(8)
            )));
        }
        for (i, chunk) in payload.chunks(8).enumerate() {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            mask.words[i] = u64::from_le_bytes(buf);
        }
        if mask.len % 64 != 0 {
            let tail = (1u64 << (mask.len % 64)) - 1;
            if mask.words.last().is_some_and(|w| w & !tail != 0) {
                return Err(PruningError::Corrupt("padding bits set in mask payload".into()));
            }
        }
        Ok(mask)
    }
}

pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (shape[0], 1),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

/// Geometry of the `R×1` block partition of an `rows×cols` matrix. When `R`
/// does not divide `rows` the last block-row is shorter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGrid {
    pub rows: usize,
    pub cols: usize,
    pub block_height: usize,
}

impl BlockGrid {
    pub fn new(rows: usize, cols: usize, block_height: usize) -> Self {
        Self {
            rows,
            cols,
            block_height,
        }
    }

    pub fn block_rows(&self) -> usize {
        self.rows.div_ceil(self.block_height)
    }

    pub fn block_count(&self) -> usize {
        self.block_rows() * self.cols
    }

    /// Row range covered by block-row `br`.
    pub fn row_range(&self, br: usize) -> std::ops::Range<usize> {
        let start = br * self.block_height;
        start..(start + self.block_height).min(self.rows)
    }

    /// Flat element indices of block `b`, top to bottom.
    pub fn block_members(&self, b: usize) -> Vec<usize> {
        let (br, col) = (b / self.cols, b % self.cols);
        self.row_range(br).map(|r| r * self.cols + col).collect()
    }
}

/// Forward `w ∘ M`; masked entries receive zero gradient.
pub fn apply_mask(graph: &mut Graph, weight: NodeId, mask: &BinaryMask) -> Result<NodeId, AutodiffError> {
    apply_multiplier(graph, weight, Rc::new(mask.multiplier()))
}

/// As [`apply_mask`] with a precomputed multiplier.
pub fn apply_multiplier(graph: &mut Graph, weight: NodeId, multiplier: Rc<Tensor>) -> Result<NodeId, AutodiffError> {
    if graph.value(weight).shape() != multiplier.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "apply_mask",
            lhs: graph.value(weight).shape().to_vec(),
            rhs: multiplier.shape().to_vec(),
        }
        .into());
    }
    graph.mul_const(weight, multiplier)
}

/// Elementwise OR of equally shaped masks.
pub fn mask_union(masks: &[&BinaryMask]) -> Result<BinaryMask, PruningError> {
    let (first, rest) = masks.split_first().ok_or(PruningError::EmptyUnion)?;
    let mut out = (*first).clone();
    for m in rest {
        if m.shape != out.shape {
            return Err(PruningError::ShapeMismatch {
                expected: out.shape.clone(),
                got: m.shape.clone(),
            });
        }
        out.block_height = gcd(out.block_height, m.block_height);
        for (a, b) in out.words.iter_mut().zip(&m.words) {
            *a |= b;
        }
    }
    Ok(out)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
