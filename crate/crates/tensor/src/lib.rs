//! Minimal f32 tensors with a Wengert-tape reverse-mode autodiff.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computation happens
//! through a [`Tape`]: leaves are registered with [`Tape::param`] or
//! [`Tape::constant`], every op on a [`Var`] is recorded, and
//! [`Tape::backward`] replays the record in reverse.
//!
//! The op set is deliberately closed: matmul, conv2d, conv_transpose2d,
//! elementwise arithmetic and activations, layer norm, softmax,
//! slice/concat/reshape/transpose and a few masked reductions.

mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod optim;
pub mod par;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use optim::{Adam, AdamState};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
