//! Dense tensors, a reverse-mode tape and a finite-difference checker.
//!
//! Every model component in this crate is written against [`Graph`]: a
//! forward pass records operations, [`Graph::gradients`] walks them back
//! and returns one gradient tensor per named parameter.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{finite_diff_check, finite_diff_compare, relative_error, GradCheckReport, LossFn};
pub use graph::{op_set, Graph, Mode, Var};
pub use params::ParamSet;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComputeError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {op}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { node: usize, op: &'static str },
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
}

#[cfg(test)]
mod tests;
