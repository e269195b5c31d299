//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! The graph records exactly the primitives the training losses need:
//! linear algebra, elementwise arithmetic, reductions, row-wise
//! normalisers (softmax, sparsemax, Gumbel-Softmax, L2, layer norm) and the
//! indexing used by embeddings and attention heads.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var, NORM_FLOOR};
pub(crate) use graph::sparsemax_backward_acc;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite function value {value} when probing coordinate {coordinate}")]
    NonFinite { coordinate: usize, value: f64 },
}
