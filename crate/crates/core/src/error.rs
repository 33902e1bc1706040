use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::eval::EvalError;
use crate::nn::ModelError;
use crate::rasterize::RasterError;
use crate::registry::RegistryError;
use crate::report::ReportError;
use crate::train::TrainError;

/// Crate-level error. Each variant maps onto one process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    ConfigFile { path: PathBuf, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 2 config error, 3 data error, 4 training divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigFile { .. } => 2,
            Error::Model(ModelError::InvalidConfig(_)) => 2,
            Error::Train(TrainError::Divergence { .. }) => 4,
            Error::Train(TrainError::Config(_)) => 2,
            Error::Train(TrainError::Model(ModelError::InvalidConfig(_))) => 2,
            Error::Registry(RegistryError::Missing(_) | RegistryError::NoEntry { .. }) => 2,
            _ => 3,
        }
    }
}
