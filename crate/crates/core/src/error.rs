use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LappError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("infeasible target: {0}")]
    Infeasible(String),

    #[error(
        "target compression rate {target} not attained within {epochs} prune epochs \
         (closest compression rate reached: {best:.6})"
    )]
    TargetNotAttained { target: f64, best: f64, epochs: usize },

    #[error("non-finite loss {value} at iteration {iteration}")]
    NonFiniteLoss { iteration: u64, value: f64 },

    #[error("cannot ingest {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LappError>;

pub(crate) fn domain(msg: impl Into<String>) -> LappError {
    LappError::Domain(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> LappError {
    LappError::Shape(msg.into())
}
