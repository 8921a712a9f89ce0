use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid hyperparameters: {0}")]
    InvalidHypers(String),

    #[error("inducing-point gram matrix is not positive definite even with jitter {jitter:e}")]
    IllConditioned { jitter: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("hyperparameter index {index} out of range (have {count})")]
    InvalidIndex { index: usize, count: usize },

    #[error("projection direction is zero")]
    DegenerateProjection,

    #[error("cavity variance is not positive ({0:e})")]
    InvalidCavity(f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("posterior lost positive definiteness and could not be repaired")]
    PosteriorBroken,

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("{path}: label column must hold exactly two distinct values, found {found}")]
    Labels { path: PathBuf, found: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line harness: 1 usage, 2 numerical
    /// failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidIndex { .. } | Error::InvalidHypers(_) => 1,
            Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Parse { .. }
            | Error::Labels { .. }
            | Error::Checkpoint(_) => 3,
            _ => 2,
        }
    }
}
