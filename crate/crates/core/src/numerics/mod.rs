//! Deterministic dense linear algebra, seeded randomness and the
//! finite-difference oracle shared by the rest of the crate.

mod matrix;
mod rng;

pub use matrix::{
    finite_diff_grad, frobenius_norm, matmul, orthogonality_residual, row_softmax, DataMatrix,
};
pub use rng::{categorical_from_uniform, SeededRng};
