//! Error types for the crate, with the process exit codes the CLI maps
//! them to (0 ok, 2 config, 3 data, 4 numeric divergence).

use std::path::PathBuf;

use thiserror::Error;

/// Errors from tensor operations and the differentiation layer.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: dimension mismatch: {detail}")]
    Dim { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

impl DiffError {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        DiffError::Dim { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        DiffError::Invalid { op, detail: detail.into() }
    }
}

/// Errors from dataset generation, frame I/O and manifest handling.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at byte {offset}: {detail}")]
    Parse { path: PathBuf, offset: usize, detail: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("frame index {t} out of range for video {video} ({frames} frames)")]
    IndexOutOfRange { video: String, t: usize, frames: usize },
    #[error("invalid dataset config: {0}")]
    Config(String),
}

impl DataError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io { path: path.into(), source }
    }
}

/// Top-level errors from training, evaluation and checkpointing.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("training diverged: {detail}")]
    Divergence { detail: String, last_good: Option<PathBuf> },
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn config(detail: impl Into<String>) -> Self {
        PipelineError::Config(detail.into())
    }

    pub fn checkpoint(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        PipelineError::Checkpoint { path: path.into(), detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Diff(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Eval(_) => 3,
            PipelineError::Checkpoint { .. } => 3,
            PipelineError::Io { .. } => 3,
            PipelineError::Divergence { .. } => 4,
        }
    }
}
