//! Error type shared by the file formats and commands.

use std::path::{Path, PathBuf};

use brainsep_core::dataio::DataError;
use brainsep_core::geometry::GeometryError;
use brainsep_core::model::ModelError;
use brainsep_core::selection::SelectionError;
use brainsep_core::training::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

/// Exit status categories of the command-line tool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Numerical => "numerical",
        }
    }
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Geometry(_) => ErrorKind::Config,
            Error::Numerical(_) => ErrorKind::Numerical,
            Error::Selection(SelectionError::InvalidThreshold(_) | SelectionError::InvalidConfig(_)) => ErrorKind::Config,
            Error::Io { .. } | Error::Parse { .. } | Error::Data(_) | Error::Selection(_) => ErrorKind::Data,
        }
    }
}

impl From<DataError> for Error {
    fn from(e: DataError) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<ModelError> for Error {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => Error::Config(e.to_string()),
            _ => Error::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Error::Numerical(e.to_string()),
            TrainError::InvalidConfig(_) => Error::Config(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Selection(s) => Error::Selection(s),
            _ => Error::Data(e.to_string()),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
