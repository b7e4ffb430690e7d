//! Dense linear algebra and activation kernels with explicit precision control.

pub(crate) mod kernel;
pub(crate) mod matrix;
mod ops;
mod rng;

pub use matrix::Matrix;
pub use ops::{
    elementwise, forward_substitution_unitriangular, forward_substitution_with, l2_normalize_rows,
    matmul, reverse_cumsum_rows, rms_norm, sigmoid, silu, softplus, Accumulation, ElementwiseOp,
    unitriangular_inverse, SolvePrecision, L2_EPS, RMS_EPS,
};
pub use rng::Rng;

/// Per-token vectors (q_t, k_t, gates, reads) are plain owned slices.
pub type Vector<T = f64> = Vec<T>;
