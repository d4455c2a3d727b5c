use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments (bad dimensions, weights, radii, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Shape mismatch between batches, duals or matrices.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An iterative method hit its cap without reaching tolerance.
    #[error("{what} did not converge: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence {
        what: &'static str,
        residual: f64,
        iterations: usize,
    },

    /// Rejection sampling exhausted its attempt budget.
    #[error(
        "rejection sampling budget exhausted at radius {radius}: {accepted} of {requested} \
         accepted after {attempts} attempts (radius too small)"
    )]
    RejectionBudget {
        radius: f64,
        accepted: usize,
        requested: usize,
        attempts: usize,
    },

    /// Non-finite value where a finite one is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Problem size exceeds a documented resource limit.
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    /// Wire-protocol violation in the coordinator/agent simulation.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
