use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NegprError>;

#[derive(Debug, Error)]
pub enum NegprError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),

    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl NegprError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NegprError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 1 config, 2 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            NegprError::Config(_) => 1,
            _ => 2,
        }
    }
}
