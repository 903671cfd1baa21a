//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every forward operation together with its inputs.
//! [`Tape::backward`] consumes the tape and returns the gradient of a scalar
//! loss with respect to every leaf that was registered with
//! `requires_grad = true`.

pub(crate) mod kernels;
mod tape;

pub use tape::{Gradients, Segment, Tape, Var};
