//! Structure-only mask of the generalized slimmable baseline: keep the
//! leading `T_d` indices of every dimension, `T_d = round(N_d·(1−S)^(1/D))`.

use super::mask::BinaryMask;
use super::PruningError;

/// Per-dimension kept extents. Rounding is half away from zero.
pub fn snn_thresholds(shape: &[usize], sparsity: f64) -> Result<Vec<usize>, PruningError> {
    super::score::check_sparsity(sparsity)?;
    if shape.is_empty() || shape.contains(&0) {
        return Err(PruningError::ShapeMismatch {
            expected: vec![],
            got: shape.to_vec(),
        });
    }
    let keep = (1.0 - sparsity).powf(1.0 / shape.len() as f64);
    Ok(shape
        .iter()
        .map(|&n| ((n as f64 * keep).round() as usize).min(n))
        .collect())
}

/// Mask keeping the top-left hyper-rectangle `[0, T_1) × … × [0, T_D)`.
/// Element granularity: the returned mask has block height 1.
pub fn snn_structured_mask(shape: &[usize], sparsity: f64) -> Result<BinaryMask, PruningError> {
    let thresholds = snn_thresholds(shape, sparsity)?;
    let mut mask = BinaryMask::zeros(shape, 1);
    let mut index = vec![0usize; shape.len()];
    for flat in 0..mask.len() {
        if index.iter().zip(&thresholds).all(|(i, t)| i < t) {
            mask.set(flat, true);
        }
        // row-major increment
        for d in (0..shape.len()).rev() {
            index[d] += 1;
            if index[d] < shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    Ok(mask)
}
