use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("capacity exceeded: {n} points, limit is {limit}")]
    Capacity { n: usize, limit: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("ill-conditioned neighborhood: k = {k} must exceed embedding dimension {dim}")]
    IllConditionedNeighborhood { k: usize, dim: usize },

    #[error("ill-conditioned covariance: {0}")]
    IllConditionedCovariance(String),

    #[error("eigensolver failed: {message} (max residual {max_residual:e})")]
    Eigen { message: String, max_residual: f64 },

    #[error("training diverged at epoch {epoch}: {message}")]
    TrainingDivergence { epoch: usize, message: String },

    #[error("sampling diverged at step {step}")]
    SamplingDivergence { step: usize },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) | Error::Shape { .. } => "usage",
            Error::Capacity { .. }
            | Error::DegenerateData(_)
            | Error::Parse { .. }
            | Error::Format(_)
            | Error::Io { .. } => "data",
            Error::IllConditionedNeighborhood { .. }
            | Error::IllConditionedCovariance(_)
            | Error::Eigen { .. } => "numeric",
            Error::TrainingDivergence { .. } | Error::SamplingDivergence { .. } => "divergence",
        }
    }
}
