//! Dense tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_rel_error};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: argument {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape { op, detail: detail.into() }
    }
}
