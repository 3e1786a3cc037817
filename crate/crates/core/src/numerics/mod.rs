//! Dense linear algebra and seeded randomness shared by every other module.
//!
//! Everything here is small and deterministic: row-major `f64` matrices,
//! Cholesky, a Jacobi eigensolver, a one-sided Jacobi SVD and a ChaCha-backed
//! random stream.

mod decomp;
mod matrix;
mod rng;

pub use decomp::{cholesky, low_rank_update, symmetric_eigen, truncated_svd, SymmetricEigen, TruncatedSvd};
pub use matrix::{dot, matmul, Matrix};
pub use rng::{gaussian_sample, mix, RandomStream};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
