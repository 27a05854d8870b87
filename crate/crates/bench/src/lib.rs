//! Shared fixtures for the criterion benchmarks.

use dsnn_core::pruning::BinaryMask;
use dsnn_core::sparse::{random_block_sparse, BlockCsrMatrix};
use dsnn_core::Tensor;

/// A square weight, its block mask at `sparsity`, the block-CSR export and
/// an input vector.
pub struct MatvecFixture {
    pub dense: Tensor,
    pub mask: BinaryMask,
    pub sparse: BlockCsrMatrix,
    pub x: Vec<f64>,
}

impl MatvecFixture {
    pub fn new(size: usize, sparsity: f64, block_height: usize) -> Self {
        let (dense, mask) = random_block_sparse(size, sparsity, block_height, 7).expect("valid fixture");
        let sparse = BlockCsrMatrix::from_masked_dense(&dense, &mask).expect("block aligned");
        let x = (0..size).map(|i| (i as f64 * 0.1).cos()).collect();
        Self { dense, mask, sparse, x }
    }
}
