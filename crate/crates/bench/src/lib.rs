//! Deterministic inputs shared by the benches.

use dmt_core::Tensor;

/// Smooth pseudo-random values in `[-1, 1]`, fixed by `seed`.
pub fn filled(shape: &[usize], seed: u32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|i| ((i as f32 + 1.0) * 0.618_034 + seed as f32 * 1.7).sin()).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Values in `[0, 1]`, as produced by clipped correlations.
pub fn nonnegative(shape: &[usize], seed: u32) -> Tensor {
    filled(shape, seed).map(|v| v.max(0.0))
}
