//! Dense f64 tensor arithmetic with reverse-mode differentiation.
//!
//! The engine is deliberately small: row-major [`Tensor`] values, a
//! [`Tape`] that records primitive operations during the forward pass,
//! and a backward replay that accumulates gradients for every leaf.
//! All arithmetic is 64-bit: gradient checks against central finite
//! differences are the primary correctness oracle, and single precision
//! would blur them.
//!
//! Tensors are immutable values once built. A tape is single-writer;
//! concurrent work happens across independent tapes.

mod check;
mod error;
mod kernels;
mod tape;
mod tensor;

pub use check::{max_rel_error, numeric_gradient};
pub use error::TensorError;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;
