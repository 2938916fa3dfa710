//! Dense `f64` tensors and a small reverse-mode differentiation tape.
//!
//! The primitive set is fixed: `matmul`, `transpose`, `softmax_rows` and the
//! [`Elementwise`] kinds. Sums, broadcasts, concatenation, log-softmax and
//! `min` are composed from those primitives on the graph, so every gradient
//! in the crate flows through a handful of audited backward rules.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use graph::{ComputeGraph, Elementwise, Gradients, NodeId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
}
