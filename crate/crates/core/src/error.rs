use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FedError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FedError {
    /// Invalid configuration value. `key` is the dotted config path when one applies.
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric failure in round {round}, client {client}: {detail}")]
    NumericFailure {
        round: usize,
        client: usize,
        detail: String,
    },

    #[error("protocol integrity violated in round {round}: {detail}")]
    ProtocolIntegrity { round: usize, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl FedError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        FedError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedError::Io {
            path: path.into(),
            source,
        }
    }
}
