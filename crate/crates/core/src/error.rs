use crate::prelude::*;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("theta layout: {0}")]
    Layout(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { what: &'static str, iterations: usize, residual: f64 },
    #[error("singular system ({0})")]
    Singular(String),
    #[error("no stabilizing Riccati solution (closest closed-loop eigenvalue modulus {closest:.6})")]
    NoStabilizingSolution { closest: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("plant fault at step {step}: {message}")]
    PlantFault { step: usize, message: String },
}

pub type Result<T> = core::result::Result<T, Error>;
