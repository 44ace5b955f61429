use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported size for {kind} topology: {reason}")]
    UnsupportedSize { kind: &'static str, reason: String },

    #[error("power iteration did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cannot give every one of {agents} agents a sample from {samples} samples")]
    EmptyShardUnfixable { agents: usize, samples: usize },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("numeric failure at round {round}: {message}")]
    Numeric { round: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Error::ShapeMismatch(message.into())
    }
}
