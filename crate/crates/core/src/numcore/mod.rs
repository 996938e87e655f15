//! Dense `f64` tensors and a recorded computation graph with reverse-mode
//! gradient accumulation.
//!
//! Every operation appends a node to a [`Graph`]; [`Graph::backward`] walks
//! the nodes once in reverse and adds the resulting adjoints into the
//! gradient slots of the leaves.

mod graph;
mod tensor;

pub use graph::{ElementwiseOp, Graph, Var};
pub use tensor::Tensor;


use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("buffer of length {len} does not fit shape {shape:?}")]
    BufferLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    Ragged,
    #[error("{0:?} needs a second operand")]
    MissingOperand(ElementwiseOp),
    #[error("{0:?} takes a single operand")]
    UnexpectedOperand(ElementwiseOp),
    #[error("{0}: no inputs")]
    EmptyInput(&'static str),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("open list is empty: the mask has no nonzero entry")]
    EmptyOpenList,
    #[error("mask entries must be 0 or 1, found {0}")]
    InvalidMask(f64),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable {0} is not recorded on this graph")]
    UnknownVar(usize),
}

/// Normalized `exp(-scores/τ)` restricted to the cells where `mask == 1`.
///
/// Scores are shifted by their minimum over the mask before exponentiation,
/// so the largest weight is always `exp(0)` and nothing overflows.
pub fn masked_softmax_values(scores: &[f64], mask: &[f64], tau: f64) -> Result<Vec<f64>, NumError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(NumError::InvalidTemperature(tau));
    }
    if let Some(&bad) = mask.iter().find(|&&m| m != 0.0 && m != 1.0) {
        return Err(NumError::InvalidMask(bad));
    }
    let min = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == 1.0)
        .map(|(&s, _)| s)
        .fold(f64::INFINITY, f64::min);
    if min == f64::INFINITY && !mask.contains(&1.0) {
        return Err(NumError::EmptyOpenList);
    }
    let mut out: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m == 1.0 { (-(s - min) / tau).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}
