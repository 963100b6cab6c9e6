use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("degenerate direction: {0}")]
    Degenerate(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Coincident prototypes make the barrier term infinite.
    #[error("prototype collapse: {0}")]
    Collapse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("pruning refused: {0}")]
    PruneRefused(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn param(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}
