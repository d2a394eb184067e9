use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BionicError {
    /// Malformed input, inconsistent shapes, or a violated data invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A non-finite value or an unrecoverable linear-algebra failure during inference.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl BionicError {
    pub fn validation(msg: impl Into<String>) -> Self {
        BionicError::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        BionicError::Numerical(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BionicError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            BionicError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, BionicError>;
