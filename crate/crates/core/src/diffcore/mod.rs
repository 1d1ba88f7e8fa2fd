//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every primitive applied to its nodes. Calling
//! [`Tape::backward`] on a scalar node sweeps the tape in reverse and returns
//! gradients for every leaf registered with [`Tape::param`].
//!
//! Every primitive checks its output for NaN/Inf and reports the offending
//! node instead of letting non-finite values propagate silently.

mod tape;
mod tensor;

pub use tape::{GradMap, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: non-finite value at node {node}, flat index {index}")]
    NonFinite {
        op: &'static str,
        node: usize,
        index: usize,
        cols: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{0}: no inputs")]
    Empty(&'static str),
}

impl DiffError {
    /// Sample row of the first non-finite entry, when this is a non-finite error.
    pub fn non_finite_row(&self) -> Option<usize> {
        match self {
            DiffError::NonFinite { index, cols, .. } => Some(index / cols.max(&1)),
            _ => None,
        }
    }
}
