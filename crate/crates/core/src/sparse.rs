//! Block-CSR storage of `R×1`-block-pruned matrices and its matvec kernels.
//!
//! A block is `R` consecutive rows of one column. Block-row `br` covers rows
//! `br·R .. br·R + R`; for each block-row the kept columns are listed in
//! ascending order and their `R` values stored contiguously:
//!
//! ```text
//!          col 0   col 1   col 2            block-row 0: cols [0, 2]
//! row 0  [  a0      .       c0  ]           block-row 1: cols [1]
//! row 1  [  a1      .       c1  ]   ──►     values: a0 a1 | c0 c1 | b2 b3
//! row 2  [  .       b2      .   ]
//! row 3  [  .       b3      .   ]
//! ```
//!
//! A partial final block-row is padded with zeros in `values`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pruning::{get_mask, BinaryMask, BlockGrid, PruningError};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("mask block {block} mixes kept and pruned entries")]
    NotBlockAligned { block: usize },
    #[error("weight shape {weight:?} does not match mask shape {mask:?}")]
    Shape { weight: Vec<usize>, mask: Vec<usize> },
    #[error("vector length {got} does not match {expected} columns")]
    Length { expected: usize, got: usize },
    #[error("corrupt block-sparse data: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Pruning(#[from] PruningError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCsrMatrix {
    rows: usize,
    cols: usize,
    block_height: usize,
    /// `row_ptr[br]..row_ptr[br + 1]` indexes the blocks of block-row `br`.
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

/// Storage precision of serialized values. Kernels always accumulate in
/// 64-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueWidth {
    F64,
    F32,
}

const HEADER_WORDS: usize = 5;

impl BlockCsrMatrix {
    /// Packs the kept blocks of `weight ∘ mask`.
    pub fn from_masked_dense(weight: &Tensor, mask: &BinaryMask) -> Result<Self, SparseError> {
        if weight.shape() != mask.shape() || weight.shape().len() != 2 {
            return Err(SparseError::Shape {
                weight: weight.shape().to_vec(),
                mask: mask.shape().to_vec(),
            });
        }
        let (rows, cols) = (weight.rows(), weight.cols());
        let r = mask.block_height();
        let grid = BlockGrid::new(rows, cols, r);
        let w = weight.data();
        let mut row_ptr = Vec::with_capacity(grid.block_rows() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for br in 0..grid.block_rows() {
            let range = grid.row_range(br);
            for c in 0..cols {
                let first = mask.get(range.start * cols + c);
                if range.clone().any(|i| mask.get(i * cols + c) != first) {
                    return Err(SparseError::NotBlockAligned { block: br * cols + c });
                }
                if !first {
                    continue;
                }
                col_idx.push(c as u32);
                values.extend(range.clone().map(|i| w[i * cols + c]));
                values.extend(std::iter::repeat_n(0.0, r - range.len()));
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            rows,
            cols,
            block_height: r,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn block_height(&self) -> usize {
        self.block_height
    }

    pub fn block_count(&self) -> usize {
        self.col_idx.len()
    }

    pub fn block_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    /// Kept column indices of block-row `br`.
    pub fn block_row_cols(&self, br: usize) -> &[u32] {
        &self.col_idx[self.row_ptr[br]..self.row_ptr[br + 1]]
    }

    /// Packed values, `block_count · R` long including padding.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Stored values that belong to real matrix rows (padding excluded).
    pub fn stored_value_count(&self) -> usize {
        (0..self.block_rows())
            .map(|br| self.block_row_cols(br).len() * self.row_count(br))
            .sum()
    }

    fn row_count(&self, br: usize) -> usize {
        self.block_height.min(self.rows - br * self.block_height)
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.rows, self.cols]);
        let d = out.data_mut();
        let r = self.block_height;
        for br in 0..self.block_rows() {
            for k in self.row_ptr[br]..self.row_ptr[br + 1] {
                let c = self.col_idx[k] as usize;
                for i in 0..self.row_count(br) {
                    d[(br * r + i) * self.cols + c] = self.values[k * r + i];
                }
            }
        }
        out
    }

    fn check_len(&self, x: &[f64]) -> Result<(), SparseError> {
        if x.len() != self.cols {
            return Err(SparseError::Length {
                expected: self.cols,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Writes the output segment of block-rows `first..first + out.len()/R`.
    fn matvec_rows(&self, x: &[f64], first: usize, out: &mut [f64]) {
        let r = self.block_height;
        let mut acc = vec![0.0; r];
        for (local, seg) in out.chunks_mut(r).enumerate() {
            let br = first + local;
            acc.fill(0.0);
            for k in self.row_ptr[br]..self.row_ptr[br + 1] {
                let xj = x[self.col_idx[k] as usize];
                let block = &self.values[k * r..(k + 1) * r];
                for (a, &v) in acc.iter_mut().zip(block) {
                    *a += v * xj;
                }
            }
            seg.copy_from_slice(&acc[..seg.len()]);
        }
    }

    /// Serializes to little-endian bytes: a header of five `u64`
    /// (rows, cols, R, block count, value width in bytes), `block_rows + 1`
    /// `u64` row pointers, `u32` column indices, then the values.
    pub fn to_bytes(&self, width: ValueWidth) -> Vec<u8> {
        let value_bytes = match width {
            ValueWidth::F64 => 8,
            ValueWidth::F32 => 4,
        };
        let mut out = Vec::with_capacity(8 * (HEADER_WORDS + self.row_ptr.len()) + 4 * self.col_idx.len() + value_bytes * self.values.len());
        for v in [self.rows, self.cols, self.block_height, self.block_count(), value_bytes] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for &p in &self.row_ptr {
            out.extend_from_slice(&(p as u64).to_le_bytes());
        }
        for &c in &self.col_idx {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for &v in &self.values {
            match width {
                ValueWidth::F64 => out.extend_from_slice(&v.to_le_bytes()),
                ValueWidth::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SparseError> {
        let corrupt = |m: &str| SparseError::Corrupt(m.to_string());
        let mut cursor = Reader { bytes, pos: 0 };
        let mut header = [0usize; HEADER_WORDS];
        for h in &mut header {
            *h = cursor.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
        }
        let [rows, cols, r, blocks, value_bytes] = header;
        if rows == 0 || cols == 0 || r == 0 || !(value_bytes == 4 || value_bytes == 8) {
            return Err(corrupt("invalid header"));
        }
        let block_rows = rows.div_ceil(r);
        let expected = 8 * (HEADER_WORDS + block_rows + 1) + blocks * (4 + value_bytes * r);
        if bytes.len() != expected {
            return Err(SparseError::Corrupt(format!("expected {expected} bytes, got {}", bytes.len())));
        }
        let row_ptr: Vec<usize> = (0..=block_rows).map(|_| cursor.u64().unwrap() as usize).collect();
        let col_idx: Vec<u32> = (0..blocks).map(|_| cursor.u32().unwrap()).collect();
        let values: Vec<f64> = (0..blocks * r)
            .map(|_| if value_bytes == 8 { cursor.f64().unwrap() } else { cursor.f32().unwrap() as f64 })
            .collect();
        if row_ptr[0] != 0 || row_ptr[block_rows] != blocks || row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(corrupt("row pointers are not monotone"));
        }
        for br in 0..block_rows {
            let cs = &col_idx[row_ptr[br]..row_ptr[br + 1]];
            if cs.windows(2).any(|w| w[0] >= w[1]) || cs.iter().any(|&c| c as usize >= cols) {
                return Err(corrupt("column indices must be strictly increasing and in range"));
            }
        }
        Ok(Self {
            rows,
            cols,
            block_height: r,
            row_ptr,
            col_idx,
            values,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let out = self.bytes.get(self.pos..self.pos + N)?.try_into().ok()?;
        self.pos += N;
        Some(out)
    }
    fn u64(&mut self) -> Option<u64> {
        self.take().map(u64::from_le_bytes)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take().map(u32::from_le_bytes)
    }
    fn f64(&mut self) -> Option<f64> {
        self.take().map(f64::from_le_bytes)
    }
    fn f32(&mut self) -> Option<f32> {
        self.take().map(f32::from_le_bytes)
    }
}

/// `y = A·x`, accumulating each output in ascending column order.
pub fn bsr_matvec(a: &BlockCsrMatrix, x: &[f64]) -> Result<Vec<f64>, SparseError> {
    a.check_len(x)?;
    let mut y = vec![0.0; a.rows];
    a.matvec_rows(x, 0, &mut y);
    Ok(y)
}

/// Worker count for the parallel kernel: `DSNN_THREADS` if set, else the
/// available parallelism.
pub fn thread_count() -> usize {
    std::env::var("DSNN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// As [`bsr_matvec`], splitting block-rows across `threads` workers. Each
/// output segment has exactly one writer, so the result is bit-identical
/// to the serial kernel.
pub fn bsr_matvec_parallel(a: &BlockCsrMatrix, x: &[f64], threads: usize) -> Result<Vec<f64>, SparseError> {
    a.check_len(x)?;
    let threads = threads.clamp(1, a.block_rows());
    if threads == 1 {
        return bsr_matvec(a, x);
    }
    let mut y = vec![0.0; a.rows];
    let per = a.block_rows().div_ceil(threads);
    std::thread::scope(|s| {
        for (chunk, seg) in y.chunks_mut(per * a.block_height).enumerate() {
            s.spawn(move || a.matvec_rows(x, chunk * per, seg));
        }
    });
    Ok(y)
}

/// Reference `y = (W∘M)·x` over every entry, ascending column order.
pub fn dense_masked_matvec(weight: &Tensor, mask: &BinaryMask, x: &[f64]) -> Result<Vec<f64>, SparseError> {
    if weight.shape() != mask.shape() || weight.shape().len() != 2 {
        return Err(SparseError::Shape {
            weight: weight.shape().to_vec(),
            mask: mask.shape().to_vec(),
        });
    }
    let (rows, cols) = (weight.rows(), weight.cols());
    if x.len() != cols {
        return Err(SparseError::Length {
            expected: cols,
            got: x.len(),
        });
    }
    let w = weight.data();
    Ok((0..rows)
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..cols {
                let m = if mask.get(i * cols + j) { 1.0 } else { 0.0 };
                acc += w[i * cols + j] * m * x[j];
            }
            acc
        })
        .collect())
}

/// Plain dense `y = W·x`, the timing baseline.
pub fn dense_matvec(weight: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = weight.cols();
    weight
        .data()
        .chunks(cols)
        .map(|row| crate::tensor::dot(row, x))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub sparsity: f64,
    pub dense_ns: f64,
    pub sparse_ns: f64,
    pub ratio: f64,
}

/// Random `size×size` weight with a scored block mask at `sparsity`.
pub fn random_block_sparse(size: usize, sparsity: f64, block_height: usize, seed: u64) -> Result<(Tensor, BinaryMask), SparseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let w = Tensor::new(vec![size, size], draw(size * size)).expect("square shape");
    let g = Tensor::new(vec![size, size], draw(size * size)).expect("square shape");
    let mask = get_mask(&w, &g, sparsity, block_height)?;
    Ok((w, mask))
}

/// Medians of `a` and `b`, timed alternately so load spikes hit both.
fn paired_median_ns(reps: usize, mut a: impl FnMut(), mut b: impl FnMut()) -> (f64, f64) {
    for _ in 0..reps.div_ceil(10) {
        a();
        b();
    }
    let time = |f: &mut dyn FnMut()| {
        let t = Instant::now();
        f();
        t.elapsed().as_nanos() as f64
    };
    let (mut sa, mut sb) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
    for _ in 0..reps {
        sa.push(time(&mut a));
        sb.push(time(&mut b));
    }
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    (median(sa), median(sb))
}

/// Median dense and block-sparse matvec times over `reps` interleaved
/// repetitions (after a warm-up of a tenth as many).
pub fn bench_speedup(sizes: &[usize], sparsities: &[f64], block_height: usize, reps: usize) -> Result<Vec<BenchRow>, SparseError> {
    let reps = reps.max(1);
    let mut rows = Vec::new();
    for &size in sizes {
        for &s in sparsities {
            let (w, mask) = random_block_sparse(size, s, block_height, size as u64)?;
            let bsr = BlockCsrMatrix::from_masked_dense(&w, &mask)?;
            let x: Vec<f64> = (0..size).map(|i| (i as f64 * 0.37).sin()).collect();
            let (dense_ns, sparse_ns) = paired_median_ns(
                reps,
                || {
                    std::hint::black_box(dense_matvec(std::hint::black_box(&w), &x));
                },
                || {
                    std::hint::black_box(bsr_matvec(std::hint::black_box(&bsr), &x).expect("length checked"));
                },
            );
            rows.push(BenchRow {
                size,
                sparsity: s,
                dense_ns,
                sparse_ns,
                ratio: dense_ns / sparse_ns,
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: std::io::Write>(out: W, rows: &[BenchRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["size", "sparsity", "dense_ns", "sparse_ns", "ratio"])?;
    for r in rows {
        w.write_record([
            r.size.to_string(),
            r.sparsity.to_string(),
            format!("{:.0}", r.dense_ns),
            format!("{:.0}", r.sparse_ns),
            format!("{:.3}", r.ratio),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(shape: &[usize], r: usize, bits: &[u8]) -> BinaryMask {
        let kept: Vec<bool> = bits.iter().map(|&b| b == 1).collect();
        BinaryMask::from_bools(shape, r, &kept).unwrap()
    }

    #[test]
    fn all_ones_stores_every_block() {
        let w = Tensor::ones(&[8, 3]);
        let a = BlockCsrMatrix::from_masked_dense(&w, &BinaryMask::ones(&[8, 3], 4)).unwrap();
        assert_eq!(a.block_count(), 2 * 3);
        assert_eq!(a.values().len(), 6 * 4);
    }

    #[test]
    fn all_zeros_stores_nothing() {
        let w = Tensor::ones(&[8, 3]);
        let a = BlockCsrMatrix::from_masked_dense(&w, &BinaryMask::zeros(&[8, 3], 4)).unwrap();
        assert_eq!(a.block_count(), 0);
        assert_eq!(bsr_matvec(&a, &[1.0, 1.0, 1.0]).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn identity_pattern() {
        let mut w = Tensor::zeros(&[3, 3]);
        let mut bits = vec![0u8; 9];
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
            bits[i * 3 + i] = 1;
        }
        let a = BlockCsrMatrix::from_masked_dense(&w, &mask_from(&[3, 3], 1, &bits)).unwrap();
        assert_eq!(bsr_matvec(&a, &[4.0, -2.0, 0.5]).unwrap(), vec![4.0, -2.0, 0.5]);
    }

    #[test]
    fn small_hand_example() {
        // [[1,2],[0,3]] with (1,0) masked, x = [1,1] → [3,3]
        let w = Tensor::from_rows(&[&[1.0, 2.0], &[0.0, 3.0]]).unwrap();
        let a = BlockCsrMatrix::from_masked_dense(&w, &mask_from(&[2, 2], 1, &[1, 1, 0, 1])).unwrap();
        assert_eq!(bsr_matvec(&a, &[1.0, 1.0]).unwrap(), vec![3.0, 3.0]);
        assert_eq!(a.block_row_cols(1), &[1]);
    }

    #[test]
    fn rejects_misaligned_mask() {
        let w = Tensor::ones(&[4, 1]);
        let m = mask_from(&[4, 1], 2, &[1, 0, 1, 1]);
        assert_eq!(
            BlockCsrMatrix::from_masked_dense(&w, &m),
            Err(SparseError::NotBlockAligned { block: 0 })
        );
    }

    #[test]
    fn partial_block_row_is_padded() {
        let w = Tensor::new(vec![5, 2], (1..=10).map(f64::from).collect()).unwrap();
        let a = BlockCsrMatrix::from_masked_dense(&w, &BinaryMask::ones(&[5, 2], 4)).unwrap();
        assert_eq!(a.block_rows(), 2);
        assert_eq!(a.values().len(), 4 * 4);
        assert_eq!(a.stored_value_count(), 10);
        assert_eq!(a.to_dense(), w);
        assert_eq!(bsr_matvec(&a, &[1.0, 0.0]).unwrap(), vec![1.0, 3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn length_mismatch() {
        let a = BlockCsrMatrix::from_masked_dense(&Tensor::ones(&[2, 2]), &BinaryMask::ones(&[2, 2], 1)).unwrap();
        assert!(matches!(bsr_matvec(&a, &[1.0]), Err(SparseError::Length { .. })));
    }

    #[test]
    fn parallel_matches_serial() {
        let (w, m) = random_block_sparse(64, 0.5, 4, 3).unwrap();
        let a = BlockCsrMatrix::from_masked_dense(&w, &m).unwrap();
        let x: Vec<f64> = (0..64).map(|i| i as f64 - 30.0).collect();
        let serial = bsr_matvec(&a, &x).unwrap();
        for t in [1, 2, 3, 7, 64] {
            assert_eq!(bsr_matvec_parallel(&a, &x, t).unwrap(), serial);
        }
    }

    #[test]
    fn bytes_roundtrip_and_corruption() {
        let (w, m) = random_block_sparse(20, 0.5, 4, 9).unwrap();
        let a = BlockCsrMatrix::from_masked_dense(&w, &m).unwrap();
        let bytes = a.to_bytes(ValueWidth::F64);
        assert_eq!(BlockCsrMatrix::from_bytes(&bytes).unwrap(), a);
        assert!(BlockCsrMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let narrow = BlockCsrMatrix::from_bytes(&a.to_bytes(ValueWidth::F32)).unwrap();
        assert_eq!(narrow.block_count(), a.block_count());
        assert!(narrow.values().iter().zip(a.values()).all(|(n, v)| (n - v).abs() < 1e-6));
    }
}
