//! Dense tensors and reverse-mode differentiation.

mod broadcast;
mod graph;
pub mod kernels;
mod params;
mod scalar;
#[allow(clippy::module_inception)]
mod tensor;

pub use broadcast::{broadcast_shapes, source_indices, sum_to_shape};
pub use graph::{BatchStats, Graph, Var};
pub use params::{Params, MAGIC, VERSION};
pub use scalar::{gemm, DType, MatRef, Scalar};
pub use tensor::{Mask, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op}: a reduced slice has every entry masked")]
    InvalidMask { op: &'static str },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("tensor container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
