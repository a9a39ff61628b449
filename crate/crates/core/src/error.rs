use std::io;

use thiserror::Error;

/// Errors surfaced by the simulator.
///
/// Variants follow the failure classes the CLI maps to exit codes:
/// configuration and usage problems, malformed data, protocol violations
/// between client and server, and numeric breakdowns during training.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model, strategy, or experiment configuration. `path` names the
    /// offending field or layer.
    #[error("configuration error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    /// An API was called with arguments that violate its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// Dataset content is invalid (bad label, empty shard, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Binary input could not be parsed.
    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    /// A client/server message arrived out of protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Training produced a non-finite value.
    #[error("numeric failure in round {round}: {msg}")]
    Numeric { round: usize, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
