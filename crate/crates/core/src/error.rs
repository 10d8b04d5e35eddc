use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid data at {location}: {message}")]
    Data { location: String, message: String },

    #[error("sample `{sample_id}` sensor `{sensor}` is missing at every time step")]
    EmptyRow { sample_id: String, sensor: String },

    #[error("sample `{0}` still has missing cells; run forward_fill first")]
    Unfilled(String),

    #[error("corrupt tensor: {0}")]
    CorruptTensor(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite loss in fold {fold} at epoch {epoch}")]
    NonFiniteLoss { fold: usize, epoch: usize },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("degenerate design matrix: {0}")]
    Degenerate(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Data {
            location: location.into(),
            message: message.into(),
        }
    }

    /// True when the error stems from bad user input (files, flags) rather
    /// than a failure while running a valid job. A missing input file counts
    /// as bad input; other I/O failures do not.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Manifest(_)
            | Error::Data { .. }
            | Error::EmptyRow { .. }
            | Error::Unfilled(_)
            | Error::CorruptTensor(_)
            | Error::Shape(_)
            | Error::Config(_)
            | Error::Checkpoint(_)
            | Error::Json { .. }
            | Error::Csv { .. }
            | Error::Metric(_)
            | Error::Degenerate(_) => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::NonFiniteGradient(_) | Error::MissingGradient(_) | Error::NonFiniteLoss { .. } => false,
        }
    }
}
