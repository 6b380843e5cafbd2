//! Dense real linear algebra: matrices, Jacobi SVD, the Moore-Penrose
//! pseudo-inverse, Cayley rotations, pixel (un)shuffling and linear
//! back-projection.

mod backproj;
mod cayley;
mod matrix;
mod reshape;
mod svd;

pub use backproj::{back_project_with, iterative_back_project, linear_back_project};
pub use cayley::{cayley, cayley_grad, SkewGenerator};
pub use matrix::{add, dist, dot, max_abs_diff, norm, norm_sq, sub, DenseMatrix, DenseVector};
pub use reshape::{pixel_shuffle, pixel_unshuffle, unshuffle_table, ImageShape};
pub use svd::{
    default_rcond, null_space, penrose_residuals, pinv, svd, SvdResult, ORTHO_TOL, SWEEP_LIMIT,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length mismatch: expected {expected}, got {got}")]
    InvalidData { expected: usize, got: usize },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is singular")]
    Singular,
    #[error("matrix has no rows or no columns")]
    Empty,
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("Jacobi SVD did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("{height}x{width} is not divisible by factor {factor}")]
    Indivisible {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("back-projection diverged at iteration {iter}: residual {residual:e} vs initial {initial:e}")]
    Diverged {
        iter: usize,
        residual: f64,
        initial: f64,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}
