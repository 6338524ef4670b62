//! Dense linear-algebra kernels shared by the solver, the model and the
//! compressor.
//!
//! Map computations run in `f64`. The SVD and symmetric eigensolver are
//! delegated to `nalgebra`; QR is a local Householder implementation with a
//! fixed nonnegative-diagonal convention.

mod decomp;
mod matrix;

pub use decomp::{
    pseudoinverse, qr_thin, rmsnorm, rmsnorm_in_place, rmsnorm_rows, sym_eig_desc, PINV_RCOND,
    QR_RANK_TOL, SYMMETRY_TOL,
};
pub use matrix::Matrix;
pub(crate) use matrix::axpy;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("matrix is rank deficient: |R[{index},{index}]| = {diagonal:e} <= {threshold:e}")]
    RankDeficient {
        index: usize,
        diagonal: f64,
        threshold: f64,
    },
    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("thin QR needs rows >= cols, got {rows}x{cols}")]
    WideMatrix { rows: usize, cols: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
}
