use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pose-diffusion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the domain of the operation (e.g. a point behind the camera).
    #[error("domain error: {0}")]
    Domain(String),

    /// The input does not determine a unique answer (collinear rays, rank-deficient means).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A decoded quantity is physically invalid (e.g. non-positive recovered depth).
    #[error("decode error: {0}")]
    Decode(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Shapes or counts passed by the caller do not match the declared contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value at {context}")]
    Numeric { context: String },

    #[error("format error in {}: {msg} (offset {offset})", file.display())]
    Format {
        file: PathBuf,
        offset: u64,
        msg: String,
    },

    /// A pose could not be rendered; callers usually resample.
    #[error("render rejected: {0}")]
    Rejected(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            file: path.into(),
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
