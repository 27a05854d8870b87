use crate::tensor::Tensor;

use super::mask::{matrix_dims, BinaryMask, BlockGrid};
use super::PruningError;

/// Per-block pruning scores `Σ |w·g|` over each `R×1` block, laid out as a
/// `[block_rows × cols]` grid (flat index = block index).
pub fn block_scores(weight: &Tensor, grad: &Tensor, block_height: usize) -> Result<Tensor, PruningError> {
    if block_height == 0 {
        return Err(PruningError::BlockHeight(block_height));
    }
    if weight.shape() != grad.shape() {
        return Err(PruningError::ShapeMismatch {
            expected: weight.shape().to_vec(),
            got: grad.shape().to_vec(),
        });
    }
    let (rows, cols) = matrix_dims(weight.shape());
    let grid = BlockGrid::new(rows, cols, block_height);
    let mut scores = vec![0.0; grid.block_count()];
    let (w, g) = (weight.data(), grad.data());
    for r in 0..rows {
        let br = r / block_height;
        for c in 0..cols {
            let i = r * cols + c;
            scores[br * cols + c] += (w[i] * g[i]).abs();
        }
    }
    Ok(Tensor::new(vec![grid.block_rows(), cols], scores)?)
}

/// Number of blocks pruned at sparsity `s` out of `blocks`: `floor(s·B)`.
///
/// The product is nudged by `1e-9` before flooring so that decimal levels
/// such as `0.29·100` land on the integer they denote rather than one below.
pub fn prune_count(sparsity: f64, blocks: usize) -> usize {
    let exact = sparsity * blocks as f64;
    ((exact + 1e-9).floor() as usize).min(blocks)
}

/// Mask with the `floor(S·B)` lowest-scoring blocks zeroed. Ties go to the
/// lower flat block index.
pub fn get_mask(weight: &Tensor, grad: &Tensor, sparsity: f64, block_height: usize) -> Result<BinaryMask, PruningError> {
    check_sparsity(sparsity)?;
    let scores = block_scores(weight, grad, block_height)?;
    Ok(mask_from_scores(weight.shape(), scores.data(), sparsity, block_height))
}

pub(crate) fn check_sparsity(sparsity: f64) -> Result<(), PruningError> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(PruningError::Sparsity(sparsity));
    }
    Ok(())
}

/// Block ranking used by [`get_mask`]: ascending score, then index.
pub fn rank_blocks(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

fn mask_from_scores(shape: &[usize], scores: &[f64], sparsity: f64, block_height: usize) -> BinaryMask {
    let (rows, cols) = matrix_dims(shape);
    let grid = BlockGrid::new(rows, cols, block_height);
    let pruned = prune_count(sparsity, grid.block_count());
    let mut mask = BinaryMask::ones(shape, block_height);
    for &b in rank_blocks(scores).iter().take(pruned) {
        let (br, col) = (b / cols, b % cols);
        for r in grid.row_range(br) {
            mask.set(r * cols + col, false);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn zero_gradient_gives_zero_scores() {
        let w = t(&[&[1.0, -2.0], &[3.0, 4.0]]);
        let s = block_scores(&w, &Tensor::zeros(&[2, 2]), 1).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_summed_block_scores() {
        let w = t(&[&[1.0, 4.0], &[1.0, 4.0], &[3.0, 0.1], &[3.0, 0.1]]);
        let s = block_scores(&w, &Tensor::ones(&[4, 2]), 2).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        // [br0 col0, br0 col1, br1 col0, br1 col1]
        assert_eq!(s.data(), &[2.0, 8.0, 6.0, 0.2]);
    }

    #[test]
    fn scores_ignore_signs() {
        let w = t(&[&[1.0, -4.0], &[0.5, 2.0]]);
        let g = t(&[&[-0.3, 0.2], &[1.0, -1.0]]);
        let base = block_scores(&w, &g, 2).unwrap();
        assert_eq!(block_scores(&w.map(|v| -v), &g, 2).unwrap(), base);
        assert_eq!(block_scores(&w, &g.map(|v| -v), 2).unwrap(), base);
    }

    #[test]
    fn zero_block_height_rejected() {
        let w = Tensor::ones(&[2, 2]);
        assert!(matches!(block_scores(&w, &w, 0), Err(PruningError::BlockHeight(0))));
    }

    #[test]
    fn partial_last_block_counts_as_one() {
        // 5 rows, R = 2: block-rows {0,1}, {2,3}, {4}
        let w = Tensor::new(vec![5, 1], vec![1.0, 1.0, 1.0, 1.0, 7.0]).unwrap();
        let s = block_scores(&w, &Tensor::ones(&[5, 1]), 2).unwrap();
        assert_eq!(s.data(), &[2.0, 2.0, 7.0]);
    }

    #[test]
    fn zero_sparsity_is_all_ones() {
        let w = Tensor::vector(vec![0.1, 0.0, -3.0]);
        let m = get_mask(&w, &w, 0.0, 1).unwrap();
        assert_eq!(m.count_zeros(), 0);
    }

    #[test]
    fn brute_force_example() {
        let w = Tensor::vector(vec![2.0, -0.5, 1.0, -3.0]);
        let g = Tensor::vector(vec![0.1, 2.0, 0.3, 0.05]);
        let m = get_mask(&w, &g, 0.5, 1).unwrap();
        assert_eq!(m.iter().collect::<Vec<_>>(), vec![false, true, true, false]);
    }

    #[test]
    fn ties_prune_lowest_index_first() {
        let w = Tensor::ones(&[4]);
        let g = Tensor::ones(&[4]);
        let m = get_mask(&w, &g, 0.5, 1).unwrap();
        assert_eq!(m.iter().collect::<Vec<_>>(), vec![false, false, true, true]);
    }

    #[test]
    fn invalid_sparsity_rejected() {
        let w = Tensor::ones(&[4]);
        assert!(get_mask(&w, &w, 1.0, 1).is_err());
        assert!(get_mask(&w, &w, -0.1, 1).is_err());
    }

    #[test]
    fn prune_count_uses_floor() {
        assert_eq!(prune_count(0.5, 7), 3);
        assert_eq!(prune_count(0.29, 100), 29);
        assert_eq!(prune_count(0.9, 64), 57);
        assert_eq!(prune_count(0.0, 10), 0);
    }

    #[test]
    fn recovered_block_returns() {
        // Block 0 is pruned under the first gradient; after its gradient grows
        // past that of a kept block, the next refresh keeps it again.
        let w = Tensor::vector(vec![1.0, 1.0, 1.0, 1.0]);
        let before = get_mask(&w, &Tensor::vector(vec![0.1, 0.5, 0.6, 0.7]), 0.25, 1).unwrap();
        assert!(!before.get(0));
        let after = get_mask(&w, &Tensor::vector(vec![0.9, 0.5, 0.6, 0.7]), 0.25, 1).unwrap();
        assert!(after.get(0));
        assert!(!after.get(1));
    }

    mod props {
        use super::*;
        use proptest::collection::vec;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn realized_count_and_nesting(
                cols in 1usize..12,
                block_rows in 1usize..8,
                r in 1usize..5,
                w in vec(-2.0f64..2.0, 12 * 8 * 4),
                g in vec(-2.0f64..2.0, 12 * 8 * 4),
                s1 in 0.0f64..0.99,
                s2 in 0.0f64..0.99,
            ) {
                let rows = block_rows * r;
                let n = rows * cols;
                let weight = Tensor::new(vec![rows, cols], w[..n].to_vec()).unwrap();
                let grad = Tensor::new(vec![rows, cols], g[..n].to_vec()).unwrap();
                let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
                let m_lo = get_mask(&weight, &grad, lo, r).unwrap();
                let m_hi = get_mask(&weight, &grad, hi, r).unwrap();
                let blocks = block_rows * cols;
                prop_assert_eq!(m_lo.count_zero_blocks().unwrap(), prune_count(lo, blocks));
                prop_assert_eq!(m_hi.count_zero_blocks().unwrap(), prune_count(hi, blocks));
                prop_assert!(m_lo.zeros_subset_of(&m_hi));
            }
        }
    }
}
