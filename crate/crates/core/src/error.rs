use thiserror::Error;

pub type Result<T> = std::result::Result<T, CflError>;

#[derive(Debug, Error)]
pub enum CflError {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("server graph is disconnected")]
    Disconnected,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("{solver} did not converge in {iterations} iterations (best residual {best_residual:e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        best_residual: f64,
    },

    #[error("user ({server}, {user}): {source}")]
    User {
        server: usize,
        user: usize,
        #[source]
        source: Box<CflError>,
    },

    #[error("data row {row}: {message}")]
    Data { row: usize, message: String },

    #[error("need {needed} samples, only {available} available")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("reference solution is zero; optimality gap is undefined")]
    ZeroReference,

    #[error("config: {0}")]
    Config(String),

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CflError {
    pub(crate) fn for_user(self, server: usize, user: usize) -> Self {
        CflError::User {
            server,
            user,
            source: Box::new(self),
        }
    }
}
