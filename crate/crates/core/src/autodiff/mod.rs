//! Dense reverse-mode automatic differentiation: tensors, the tape, the few
//! composite layers the forecaster is built from, a central-difference
//! checker and the parameter checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
mod params;
mod tape;
mod tensor;

pub use params::{Bound, ParamStore};
pub use tape::{Csr, Gradients, Segments, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    Ragged,
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    Axis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("segment table covers {segments} elements but {values} were given")]
    SegmentLength { values: usize, segments: usize },
    #[error("{op}: argument outside the function domain")]
    Domain { op: &'static str },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
