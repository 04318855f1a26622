use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file was readable but its contents are not acceptable.
    #[error("{path}: unsupported format: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument `{name}`: {detail}")]
    InvalidArgument { name: String, detail: String },

    /// The foreground mask is empty (before or after clipping); the caller
    /// should skip or retry the sample.
    #[error("no foreground: {0}")]
    NoForeground(&'static str),

    #[error("positive weight undefined: no positive pixels")]
    UndefinedWeight,

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("non-finite value in `{name}` at {context}")]
    NonFinite { name: String, context: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }

    pub(crate) fn invalid(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { name: name.into(), detail: detail.into() }
    }

    /// Input validation failures, as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::InvalidArgument { .. } | Error::Config(_) | Error::Shape(_) | Error::Format { .. })
    }
}
