//! Dense `f64` tensors with an eager reverse-mode tape.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{required_op_set, Gradients, Graph, Mask, NodeId, OpKind, IGNORE_INDEX};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("unbound input `{0}`")]
    UnboundInput(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range in {op} (size {size})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

#[cfg(test)]
mod tests;
