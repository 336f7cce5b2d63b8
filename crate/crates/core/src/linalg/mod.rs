//! Dense row-major matrices and the handful of kernels built on them.

mod matrix;
mod ops;
mod svd;

pub use matrix::{Dtype, Matrix, Real};
pub use ops::{axpy, dot, matmul, matmul_transb, matvec, row_softmax, row_softmax_inplace};
pub use svd::{
    effective_rank, pinv_svd, singular_values, spectral_norm, svd, Svd, DEFAULT_PINV_CUTOFF,
};
