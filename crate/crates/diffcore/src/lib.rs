//! Minimal reverse-mode differentiation over dense row-major tensors.
//!
//! A [`Tape`] records primitives as they are evaluated; [`Tape::backward`]
//! replays the record in reverse to produce gradients for trainable leaves.
//! Everything is single threaded and reductions run in a fixed order, so a
//! given tape always produces bitwise identical values and gradients.

mod backward;
mod error;
pub mod gradcheck;
pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::grad_check;
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
