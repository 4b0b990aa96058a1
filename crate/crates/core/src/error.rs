use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GatnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GatnError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("usage error: {0}")]
    Usage(String),

    /// A loss, gradient or parameter went non-finite.
    #[error("numerical abort in {context}: {detail}")]
    Numerical { context: String, detail: String },

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty evaluation")]
    EmptyEvaluation,

    #[error("gradient check invalid: {0}")]
    InvalidCheck(String),
}

impl GatnError {
    pub fn config(msg: impl Into<String>) -> Self {
        GatnError::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        GatnError::Usage(msg.into())
    }

    pub fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        GatnError::Numerical {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GatnError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            GatnError::Config(_)
            | GatnError::Parse { .. }
            | GatnError::Usage(_)
            | GatnError::EmptyEvaluation => 2,
            GatnError::Numerical { .. } | GatnError::InvalidCheck(_) => 3,
            GatnError::Io { .. } => 4,
        }
    }
}
