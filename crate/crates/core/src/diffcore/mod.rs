//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar root returns [`Gradients`] for every
//! variable that requires grad and fed into the root. Only the operations the
//! prompt-bank objective needs are provided; there is no broadcasting.

mod tape;
mod tensor;

pub mod gradcheck;

pub use tape::{softmax_row, Gradients, Tape, Var};
pub use tensor::Tensor;
