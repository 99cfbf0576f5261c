//! Dense `f64` tensors with a reverse-mode gradient tape.
//!
//! Values are recorded on a [`Tape`] as [`Var`] handles; every operation
//! validates shapes, rejects non-finite results and registers its
//! vector-Jacobian product. [`Tape::backward`] replays the record in
//! reverse from a scalar loss.

mod error;
pub mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_indices, GradCheckReport};
pub use ops::{concat, gelu, permute_indices, sigmoid, silu, softplus, softplus_inv};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
