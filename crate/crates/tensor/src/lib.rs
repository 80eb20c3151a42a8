//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! The tape is rebuilt for every forward pass. Ops are evaluated eagerly,
//! values are checked for finiteness as they are produced, and
//! [`Graph::backward`] walks the tape once in reverse.

mod gemm;
mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var, MASK_OFFSET};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range in {op} (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Invalid(String),
}
