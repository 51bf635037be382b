//! Reverse-mode automatic differentiation over dense `f64` arrays, plus the
//! SGD optimizer and finite-difference gradient checks.

mod array;
pub mod gradcheck;
mod sgd;
mod tape;

pub use array::Tensor;
pub use gradcheck::{check_primitive, compare_gradients, grad_check, primitive_suite, GradCheckReport};
pub use sgd::Sgd;
pub use tape::{Primitive, Tape, Var, DISTRIBUTION_TOLERANCE};

pub(crate) use tape::softmax_row;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("backward root must be scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("cross-entropy target row {row} is not a distribution (sum {sum})")]
    InvalidTarget { row: usize, sum: f64 },
    #[error("{0}")]
    InvalidArgument(String),
}
