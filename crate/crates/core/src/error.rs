use thiserror::Error;

use crate::kernelspec::ParseError;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure classes shared by every solver in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad bounds, mismatched grids or shapes.
    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Parse(#[from] ParseError),

    /// A kernel expression produced an invalid value at a grid node.
    #[error("evaluation error in `{role}` at {location}: {message}")]
    Eval {
        role: String,
        location: String,
        message: String,
    },

    /// The discretized second-kind operator is numerically singular.
    #[error("singular operator: reciprocal condition estimate {rcond:.3e} below threshold ({context})")]
    Singular { rcond: f64, context: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no convergence after {iterations} iterations (last residuals phi={last_phi:.3e}, psi={last_psi:.3e})")]
    NonConvergence {
        iterations: usize,
        last_phi: f64,
        last_psi: f64,
        history: Vec<(f64, f64)>,
    },

    /// A post-solve identity failed beyond its tolerance.
    #[error("verification failed: {0}")]
    Verification(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
