//! Dense linear algebra and small-network forward primitives.
//!
//! Everything here is sized for two-view geometry and attention over a few
//! thousand keypoints: row-major `f64` storage, fixed summation order, no
//! BLAS.

mod dense;
pub mod mat3;
mod mlp;
mod svd;
pub mod weights;

pub use dense::{dot_slices, softmax_call_count, softmax_rows, DenseMatrix};
pub use mlp::{Activation, Layer, MlpParams};
pub use svd::{smallest_right_singular_vector, svd, svd3, Svd, Svd3, MAX_SWEEPS};
pub(crate) use svd::fix_sign as svd_fix_sign;
pub use weights::{load_weights, save_weights, ArchMeta, Tensor, WeightStore};

use thiserror::Error;

/// Errors raised by the numeric kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    /// Operand shapes do not agree.
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A buffer length does not match the declared shape.
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },
    /// The Jacobi sweeps did not reach the off-diagonal tolerance.
    #[error("jacobi iteration did not converge within {0} sweeps")]
    NoConvergence(usize),
    /// Input contained NaN or infinity.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}
