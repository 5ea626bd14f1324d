use std::path::PathBuf;

use thiserror::Error;

/// Every failure the toolkit can report. Each variant maps onto one CLI exit code.
#[derive(Debug, Error)]
pub enum TulError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TulError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TulError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 usage/config, 2 data, 3 training divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            TulError::Config(_) => 1,
            TulError::Divergence { .. } => 3,
            TulError::Data(_)
            | TulError::Io { .. }
            | TulError::Shape(_)
            | TulError::Checkpoint(_)
            | TulError::Json(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, TulError>;
