use std::path::PathBuf;

/// Failures surfaced by the command-line layer.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, bad config keys, or values that do not parse.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] tabdiff_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file exists but its contents are malformed.
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// 1 for usage errors, 2 for data and model errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Core(tabdiff_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
