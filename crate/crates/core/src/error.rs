use std::path::PathBuf;

use suseg_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("NIfTI error on {}: {message}", path.display())]
    Nifti { path: PathBuf, message: String },
    /// Invalid volume contents or geometry.
    #[error("{0}")]
    Data(String),
    /// Training or inference failure.
    #[error("model error: {0}")]
    Model(String),
    #[error("case {case}: {source}")]
    Case {
        case: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Coarse error class, used by the CLI to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Model,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Io { .. } | Error::Nifti { .. } | Error::Data(_) => ErrorClass::Data,
            Error::Model(_) | Error::Nn(_) => ErrorClass::Model,
            Error::Case { source, .. } => source.class(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_case(self, case: &str) -> Self {
        Error::Case {
            case: case.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
