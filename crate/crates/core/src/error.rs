//! Error type shared by every solver in the crate.

use thiserror::Error;

/// Errors raised by model construction and the numerical pipelines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Malformed input: wrong sign, empty set, non-finite coefficient value.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    /// The Picard map of the one-step FBSDE solve did not contract.
    #[error(
        "non-contraction at t={t}, x={x:?}: {iterations} iterations, last update {update:e}, ratio {ratio:.3}"
    )]
    NonContraction {
        t: f64,
        x: Vec<f64>,
        iterations: usize,
        update: f64,
        ratio: f64,
    },

    /// No admissible step was found by the contraction probe.
    #[error("non-contractive problem: no step in [{smallest:e}, {delta_init:e}] passes the contraction probe")]
    NonContractiveProblem { delta_init: f64, smallest: f64 },

    /// The grid time step is larger than the admissible contraction step.
    #[error("time step {delta:e} exceeds admissible contraction step {delta0:e}")]
    StepTooLarge { delta: f64, delta0: f64 },

    /// The algebraic fixed-point solve ran out of iterations.
    #[error("algebraic solve did not converge: residual {residual:e} after {iterations} iterations{}", location.as_ref().map(|l| format!(" at {l}")).unwrap_or_default())]
    NonConvergence {
        residual: f64,
        iterations: usize,
        location: Option<String>,
    },

    /// Explicit finite-difference stability condition violated.
    #[error("CFL violation: {0}")]
    Cfl(String),

    /// A finite-difference field stopped being finite.
    #[error("numerical blow-up at slice {slice}, node {node}")]
    BlowUp { slice: usize, node: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at column {column}: {message}")]
    Parse { column: usize, message: String },
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// True for failures of the numerics (as opposed to bad configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonContraction { .. }
                | Error::NonContractiveProblem { .. }
                | Error::NonConvergence { .. }
                | Error::BlowUp { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
