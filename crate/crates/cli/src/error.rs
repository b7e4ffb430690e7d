use std::path::PathBuf;

use thiserror::Error;

use crate::config::ConfigError;
use crate::report::ReportParseError;
use crate::tensor_io::TensorError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Tensor {
        path: PathBuf,
        #[source]
        source: TensorError,
    },

    #[error("{path}: byte {offset}: {detail}")]
    Prompt {
        path: PathBuf,
        offset: usize,
        detail: String,
    },

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Report(#[from] ReportParseError),

    #[error(transparent)]
    Kernel(#[from] gdr2_core::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
