use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value or inconsistent settings.
    #[error("config: {0}")]
    Config(String),
    /// Arguments violating an operation's preconditions.
    #[error("invalid input: {0}")]
    Invalid(String),
    /// A dense allocation larger than the configured guard.
    #[error("dense similarity needs {needed_mb:.1} MB, above the {limit_mb} MB limit")]
    MemoryGuard { needed_mb: f64, limit_mb: u64 },
    /// Malformed file contents.
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    /// True for errors caused by configuration or usage rather than runtime
    /// conditions.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
