//! Dense tensors and a reverse-mode differentiable expression graph.

mod activations;
mod graph;
mod tensor;

pub use activations::{leaky_relu, sigmoid, softplus, DEFAULT_LEAKY_SLOPE};
pub use graph::{Bindings, Evaluation, GradCheck, Gradients, Graph, NodeId, Op};
pub use tensor::Tensor;


use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("tensor shape {shape:?} does not hold {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("non-finite value produced at node {node}")]
    NonFinite { node: String },
    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),
    #[error("gradient requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("graph has no nodes")]
    EmptyGraph,
}
