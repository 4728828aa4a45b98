use std::path::PathBuf;

use thiserror::Error;

use crate::linalg::SvdFailure;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid architecture: layer `{layer}`: {reason}")]
    Architecture { layer: String, reason: String },

    #[error(transparent)]
    SvdNonConvergence(Box<SvdFailure>),

    #[error("packet decode error at layer `{layer}`: {reason}")]
    Decode { layer: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset load error ({}): {reason}", path.display())]
    Load { path: PathBuf, reason: String },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
