//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Graph`] as they execute. [`Graph::grad`]
//! appends the backward pass to the same graph using the same primitives, so
//! a gradient can be differentiated again. That is how the norm-of-gradient
//! term [`grad_norm_grad`] gets its exact Jacobian-transpose product.
//!
//! ```
//! use diffcore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.square(x);
//! let dy = g.grad(y, &[x]).unwrap()[0];
//! assert_eq!(g.value(dy).item(), Some(6.0));
//! let d2y = g.grad(dy, &[x]).unwrap()[0];
//! assert_eq!(g.value(d2y).item(), Some(2.0));
//! ```

mod backward;
mod graph;
mod tensor;

pub use backward::{grad_norm_grad, GradientMap};
pub use graph::{Graph, LeafKind, Var, LOG_FLOOR};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch at operation {op_index} ({op}): {detail}")]
    ShapeMismatch {
        op_index: usize,
        op: &'static str,
        detail: String,
    },
    #[error("loss must hold a single value, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("operation {op_index} ({op}) has no derivative rule")]
    NonDifferentiable { op_index: usize, op: &'static str },
    #[error("node {0} requested more than once")]
    DuplicateParameter(usize),
    #[error("expected {expected} replay inputs, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("node {0} does not exist")]
    UnknownNode(usize),
}
