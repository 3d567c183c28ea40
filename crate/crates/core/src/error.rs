use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// A value fell outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// An operation was invoked in a state that does not permit it
    /// (e.g. backward without a preceding forward).
    #[error("state error: {0}")]
    State(String),

    /// Malformed binary input. `offset` is the byte offset of the problem.
    #[error("parse error in {path}: {message} (at byte offset {offset})")]
    Parse {
        path: String,
        offset: u64,
        message: String,
    },

    /// Configuration did not validate. Every violation is listed.
    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("model file error in {path}: {message}")]
    Model { path: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
