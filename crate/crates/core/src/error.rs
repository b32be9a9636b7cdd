use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("graph is disconnected")]
    DisconnectedGraph,

    /// Every redraw left at least one partition square empty.
    #[error("random geometric graph not regular after {attempts} attempts (try a larger c)")]
    RegularityFailure { attempts: usize },

    #[error("protocol precondition violated: {0}")]
    ProtocolPrecondition(String),

    #[error("unsupported topology for this operation: {0}")]
    UnsupportedTopology(String),

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid canonical path set: {0}")]
    InvalidPathSet(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
