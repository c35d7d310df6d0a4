use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = AppError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AppError {
    /// Bad flags, bad config values or contradictory settings.
    #[error("{0}")]
    Usage(String),
    /// Malformed or inconsistent input files.
    #[error("{0}")]
    Data(String),
    /// A non-finite loss or parameter during training.
    #[error("{0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Model(#[from] transaction_core::Error),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        use transaction_core::Error as E;
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) | AppError::Io { .. } => 2,
            AppError::Numeric(_) => 3,
            AppError::Model(e) => match e {
                E::Config(_) | E::UnknownVariant(_) | E::UnknownMode(_) | E::HeadSplit { .. } | E::OddModelWidth(_) => 1,
                E::NonFinite { .. } => 3,
                _ => 2,
            },
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(io::Error) -> AppError + '_ {
        move |source| AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
