//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! Values are recorded on a [`Tape`] as operations execute; [`Tape::backward`]
//! walks the record in reverse and accumulates exact gradients. Broadcasting
//! is limited to a right operand whose shape is a suffix of the left one
//! (a bias row added to every row, for instance).

mod gradcheck;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{gradcheck, GradcheckReport};
pub use tape::{concat, Gradients, Tape, Var, MASK_LOGIT};
pub use tensor::Tensor;

pub(crate) use tape::softplus;

/// Incompatible operand shapes.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("op `{op}`: {detail}")]
pub struct ShapeError {
    pub op: &'static str,
    pub detail: String,
}

impl ShapeError {
    pub fn new(op: &'static str, detail: impl Into<String>) -> Self {
        ShapeError {
            op,
            detail: detail.into(),
        }
    }
}
