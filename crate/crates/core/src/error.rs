use thiserror::Error;

pub type Result<T, E = SecosError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SecosError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate embedding for class `{0}`: mean prompt embedding has zero norm")]
    DegenerateEmbedding(String),

    #[error("degenerate feature at row {0}: zero norm")]
    DegenerateFeature(usize),

    #[error("input error: {0}")]
    Input(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SecosError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        SecosError::Parameter(msg.into())
    }

    pub(crate) fn structure(msg: impl Into<String>) -> Self {
        SecosError::Structure(msg.into())
    }
}
