use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Unknown names, invalid hyperparameters, malformed manifests.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("unknown account `{0}`")]
    Auth(String),

    #[error("query budget exhausted for `{account}`: {used} used, cap {cap}, requested {requested}")]
    Quota {
        account: String,
        used: u64,
        cap: u64,
        requested: u64,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    /// Feature extraction stopped after `completed` rows.
    #[error("partial result after {completed} rows: {source}")]
    Partial {
        completed: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("remote service error: {0}")]
    Remote(String),

    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Walks through stage/partial wrappers to the originating error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::Partial { source, .. } => source.root(),
            other => other,
        }
    }
}
