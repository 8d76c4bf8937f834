//! Dense tensors, reverse-mode gradients, Adam and the finite-difference
//! gradient harness. Everything is generic over [`Scalar`](crate::Scalar).

mod adam;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, primitive_suite, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("index {index} out of range for {len} in {op}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("gold index {index} is masked")]
    MaskedTarget { index: usize },
    #[error("softmax row has every entry masked")]
    AllMasked,
    #[error("{op} on empty input")]
    Empty { op: &'static str },
    #[error("width {dim} not divisible by {heads} heads")]
    HeadsDoNotDivide { dim: usize, heads: usize },
    #[error("invalid segment offsets in {op}")]
    BadSegments { op: &'static str },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
}
