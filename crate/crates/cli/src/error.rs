use std::path::PathBuf;

use carmort::data::DataError;
use carmort::diagnostics::DiagnosticsError;
use carmort::draws::DrawsError;
use carmort::graph::GraphError;
use carmort::sampler::SamplerError;
use carmort::summary::SummaryError;
use carmort::synthetic::SyntheticError;
use thiserror::Error;

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Draws(#[from] DrawsError),
    #[error("summary: {0}")]
    Summary(#[from] SummaryError),
    #[error("diagnostics: {0}")]
    Diagnostics(#[from] DiagnosticsError),
    #[error("simulation: {0}")]
    Synthetic(#[from] SyntheticError),
    #[error("stratum {stratum}: {source}")]
    Sampler {
        stratum: String,
        source: SamplerError,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not converged: {0}")]
    NotConverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. }
            | CliError::Invalid(_)
            | CliError::Data(_)
            | CliError::Graph(_)
            | CliError::Draws(_)
            | CliError::Summary(_) => EXIT_INPUT,
            CliError::Sampler {
                source: SamplerError::InvalidConfig(_) | SamplerError::GraphMismatch,
                ..
            } => EXIT_INPUT,
            CliError::Diagnostics(
                DiagnosticsError::InvalidThreshold(_) | DiagnosticsError::InvalidWindows { .. },
            ) => EXIT_INPUT,
            CliError::NotConverged(_) => EXIT_NOT_CONVERGED,
            CliError::Diagnostics(_) | CliError::Synthetic(_) | CliError::Sampler { .. } | CliError::Write { .. } => {
                EXIT_RUNTIME
            }
        }
    }
}

pub fn write_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Write { path, source }
}
