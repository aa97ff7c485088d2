//! Continuous normalizing flows: the context-conditioned ODE network, a
//! fixed-step RK4 integrator with exact trace accumulation, and the
//! resulting log-densities.
//!
//! States are stored as rows: a `P x d` matrix holds `P` independent
//! trajectories of a `d`-dimensional flow that share one context.

mod net;
mod ode;

pub use net::{adaptive_bias, layer_norm, plain_bias, BiasMode, FieldContext, NetField, OdeNet, TraceMode};
pub use ode::{
    gaussian_log_density, integrate, integrate_on, integrate_with_trace, log_prob_conditional,
    log_prob_on, log_prob_prior, Direction, FlowState, FlowTime, LinearField, Solver, VectorField,
};

use thiserror::Error;

use crate::compute::ComputeError;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error("non-finite value at integration step {step} ({op})")]
    NonFinite { step: usize, op: &'static str },
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("solver needs at least one step")]
    NoSteps,
    #[error("invalid time interval [{0}, {1}]")]
    InvalidTime(f64, f64),
}
