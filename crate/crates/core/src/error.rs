use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every module of the toolkit.
///
/// The CLI maps [`Error::Parameter`] and [`Error::Usage`] to exit code 1 and
/// everything else to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid landmarks: {0}")]
    Landmark(String),

    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(String),

    #[error("weight file error in layer {layer}: {msg}")]
    Weights { layer: usize, msg: String },

    #[error("non-finite data: {0}")]
    Data(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("json error in {path}: {source}")]
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

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// True for errors caused by how the caller invoked something rather than
    /// by the data it pointed at.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Parameter(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
