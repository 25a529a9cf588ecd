//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! replays the record in reverse and accumulates gradients into each
//! recorded tensor that requires one.

mod kernel;
mod tape;
mod tensor;

pub use kernel::{gemm, Transpose};
pub use tape::{clamp_prob, sigmoid, softmax_in_place, ElementwiseOp, Tape, Var, PROB_EPS};
pub use tensor::{argmax, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have differing lengths")]
    RaggedRows,
    #[error("expected a matrix, got shape {0:?}")]
    NotMatrix(Vec<usize>),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("index {index} out of range for dimension {bound}")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("{op}: value {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{op} expects {expected} operands, got {got}")]
    Arity { op: String, expected: usize, got: usize },
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("variable {0} is not recorded on this tape")]
    UnknownVar(usize),
}
