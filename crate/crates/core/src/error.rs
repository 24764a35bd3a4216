use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("graph file {0} contains no triples")]
    EmptyGraph(PathBuf),

    #[error("unknown entity id {0}")]
    UnknownEntity(usize),

    #[error("unknown relation id {0}")]
    UnknownRelation(usize),

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("invalid subgraph: {0}")]
    InvalidSubgraph(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in {0}")]
    NonFinite(String),

    #[error("backward called before a forward pass was recorded")]
    NoForward,

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
