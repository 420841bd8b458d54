use std::path::{Path, PathBuf};

use hierpack_core::Error as CoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),
    #[error("missing artifact {}: {hint}", path.display())]
    Missing { path: PathBuf, hint: String },
    #[error("{}: {message} (at byte {offset})", path.display())]
    Format { path: PathBuf, offset: u64, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::Missing { path: path.to_path_buf(), hint: "file not found".into() }
        } else {
            Error::Io { path: path.to_path_buf(), source }
        }
    }

    pub fn format(path: &Path, offset: u64, message: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), offset, message: message.into() }
    }

    /// Short machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Missing { .. } => "missing-artifact",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Core(CoreError::NonFinite { .. }) => "non-finite",
            Error::Core(CoreError::Validation(_)) => "validation",
            Error::Core(CoreError::Usage(_)) => "usage",
            Error::Core(CoreError::Dimension { .. } | CoreError::Index { .. }) => "shape",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Missing { .. } => 3,
            Error::Core(CoreError::NonFinite { .. }) => 4,
            _ => 1,
        }
    }

    /// The single line printed on failure.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\t'], " ");
        match self {
            Error::Core(CoreError::NonFinite { step }) => format!("error\t{}\tstep={step}\t{msg}", self.category()),
            _ => format!("error\t{}\t{msg}", self.category()),
        }
    }
}
