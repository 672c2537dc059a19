use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Core(#[from] lcq_core::Error),
    #[error("malformed data at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("{0}")]
    Usage(String),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Numerical(String),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn format(offset: usize, reason: impl Into<String>) -> Self {
        Error::Format { offset, reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// 1 for numerical failures, 2 for bad input or configuration.
    pub fn exit_code(&self) -> i32 {
        use lcq_core::Error as E;
        match self {
            Error::Numerical(_) => 1,
            Error::Core(E::NonFinite { .. } | E::NonFiniteLoss(_) | E::Divergence { .. }) => 1,
            _ => 2,
        }
    }
}
