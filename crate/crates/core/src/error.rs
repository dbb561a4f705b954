use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or domain-type construction.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    /// Operation parameters that do not fit the input (crop outside image, bad box).
    #[error("parameter error: {0}")]
    Param(String),

    /// Shape or id mismatch between arguments.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("embedder failed for {context}: {message}")]
    Embedder { context: String, message: String },

    #[error("missing pseudo-label for item {0}")]
    MissingPseudoLabel(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("run failed: {0}")]
    Run(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.into(),
        }
    }

    /// True for errors caused by user configuration rather than runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InfeasibleSplit(_))
    }
}
