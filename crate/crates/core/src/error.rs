use std::path::PathBuf;

/// Errors surfaced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("guidance error: {message}")]
    Guidance { message: String, retriable: bool },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("non-finite loss in term `{term}` at iteration {iteration}")]
    NonFiniteLoss { term: String, iteration: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("checkpoint integrity error in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("invalid anchor file, line {line}: {message}")]
    AnchorParse { line: usize, message: String },

    #[error("image export failed: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Guidance { retriable: true, .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
