//! Error type shared by all modules of the crate.
//!
//! Scientific verdicts (a failed cone check, a plaque-expansivity
//! witness, an inconclusive search) are ordinary return values, not
//! errors. `Error` is reserved for invalid inputs, numerical
//! breakdowns and violations of the model assumptions that the caller
//! cannot interpret as a verdict.

use nalgebra::Vector3;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("certification failed: {message} (worst cell at {cell:?})")]
    Certification { message: String, cell: [f64; 3] },

    #[error("iteration did not converge: {message} (worst point {point:?}, residual {residual:.3e})")]
    Convergence {
        message: String,
        point: [f64; 3],
        residual: f64,
    },

    #[error("no admissible scale found above the resolution floor {floor:.3e}")]
    ScaleNotFound { floor: f64 },

    #[error("not partially hyperbolic in this metric: {0}")]
    NotPartiallyHyperbolic(String),

    #[error("model violation: {0}")]
    ModelViolation(String),

    #[error("leaf integration failed: {message} at {location:?}")]
    Integration {
        message: String,
        location: [f64; 3],
    },

    #[error("no intersection: {0}")]
    NoIntersection(String),

    #[error("ambiguous intersection (scale violated): {0}")]
    Ambiguity(String),

    #[error("holonomy undefined: companion curve left the tube ({0})")]
    HolonomyUndefined(String),

    #[error("tubular neighborhood overlaps itself: {0}")]
    TubeOverlap(String),

    #[error("graph-transform step failed at node {node:?}: {message}")]
    Step { message: String, node: (usize, usize) },

    #[error("tangency check failed: {0}")]
    Tangency(String),

    #[error("discretization too coarse: {0}")]
    Resolution(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn violation(msg: impl Into<String>) -> Self {
        Error::ModelViolation(msg.into())
    }

    pub(crate) fn convergence(msg: impl Into<String>, point: Vector3<f64>, residual: f64) -> Self {
        Error::Convergence {
            message: msg.into(),
            point: [point.x, point.y, point.z],
            residual,
        }
    }
}
