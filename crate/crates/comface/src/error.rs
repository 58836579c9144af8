use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] comface_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("task manifest {path} has {} invalid row(s):\n{}", .rows.len(), .rows.join("\n"))]
    Task { path: PathBuf, rows: Vec<String> },
    #[error("{0} already holds a completed run; pass --force to overwrite")]
    RunExists(PathBuf),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn parse(path: impl AsRef<Path>, message: impl ToString) -> Self {
        Error::Parse { path: path.as_ref().to_path_buf(), message: message.to_string() }
    }

    pub fn checkpoint(path: impl AsRef<Path>, message: impl ToString) -> Self {
        Error::Checkpoint { path: path.as_ref().to_path_buf(), message: message.to_string() }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(comface_core::Error::Config(_)) => "config",
            Error::Core(comface_core::Error::Contract(_)) => "contract",
            Error::Core(comface_core::Error::NonFinite(_)) => "non_finite",
            Error::Core(comface_core::Error::Degenerate(_)) => "degenerate",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Image { .. } => "image",
            Error::Task { .. } => "task_manifest",
            Error::RunExists(_) => "run_exists",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Invalid(_) => "invalid",
        }
    }

    /// Whether the failure is bad input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Core(comface_core::Error::Config(_)) | Error::Parse { .. } | Error::Task { .. } | Error::Invalid(_)
        )
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            message: String,
        }
        #[derive(Serialize)]
        struct Envelope<'a> {
            error: Body<'a>,
        }
        serde_json::to_string(&Envelope { error: Body { kind: self.kind(), message: self.to_string() } })
            .expect("error serializes")
    }
}
