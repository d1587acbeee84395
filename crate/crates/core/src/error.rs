use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("split error: {0}")]
    Split(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("embedding provider failed after {attempts} attempt(s): {message}")]
    Provider { attempts: usize, message: String },

    #[error("training diverged ({context}) at epoch {epoch}")]
    Divergence { context: String, epoch: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("prompt of {needed} tokens cannot fit budget {budget} even without neighbors")]
    Budget { needed: usize, budget: usize },

    #[error("unknown label {0:?}")]
    Label(String),

    #[error("injection error: {0}")]
    Injection(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Config(_) | Error::Template(_) => 1,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::UnknownNode(_)
            | Error::Split(_)
            | Error::Checkpoint(_)
            | Error::Label(_) => 2,
            _ => 3,
        }
    }
}
