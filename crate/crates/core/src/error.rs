use thiserror::Error;

pub type Result<T> = std::result::Result<T, AdauError>;

#[derive(Debug, Error)]
pub enum AdauError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("non-finite loss at epoch {epoch} (last finite mds={last_mds}, disc={last_disc})")]
    NonFiniteLoss {
        epoch: usize,
        last_mds: f64,
        last_disc: f64,
    },

    #[error("did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AdauError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        AdauError::InvalidInput(msg.into())
    }
}
