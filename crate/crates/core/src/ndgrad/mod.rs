//! Dense tensors with tape-based reverse-mode differentiation, plus the
//! Jacobi eigen-solver behind the rank diagnostics.

pub mod kernels;
pub mod linalg;
mod tape;
mod tensor;

pub use linalg::gram_eigenvalues;
pub use tape::{Conv2dSpec, Gradients, NormStats, PadMode, Tape, Var, NORM_EPS};
pub use tensor::{Precision, Tensor};

/// Floor applied to slice norms in [`Tape::l2_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;
