//! Dense tensors with a reverse-mode differentiation tape.
//!
//! Enough machinery to train small MLPs and differentiate the objectives:
//! record primitives on a [`Tape`] through [`Var`] handles, then call
//! [`Tape::backward`] on a scalar loss.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{logsumexp, Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape {shape:?} needs a different element count than {len}")]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("shape mismatch in {op}: {shapes:?}")]
    ShapeMismatch { op: String, shapes: Vec<Vec<usize>> },
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity {
        op: String,
        expected: usize,
        got: usize,
    },
    #[error("domain violation: {0}")]
    Domain(&'static str),
    #[error("loss must be a single element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} is not on this tape")]
    ForeignNode(usize),
    #[error("non-finite function value {0}")]
    NonFinite(f64),
}

#[cfg(test)]
mod tests;
