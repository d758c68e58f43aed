//! Dense tensors with a single-owner reverse-mode gradient tape.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Tape`] and replayed backwards with [`Tape::backward`]. Every kernel is
//! generic over [`Scalar`] so the same graph can be evaluated in 32-bit for
//! training and in 64-bit for gradient checks.

mod error;
pub mod gradcheck;
pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::finite_difference_check;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
