use std::path::PathBuf;

use crate::bootstrap::BootstrapError;
use crate::claims::CodeError;
use crate::cohort::CohortError;
use crate::gateway::{GatewayError, RunError};
use crate::metrics::MetricsError;
use crate::prompt::PromptError;
use crate::registry::RegistryError;
use crate::retrieval::IndexError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{failed} of {total} cases failed at the endpoint")]
    CasesFailed { failed: usize, total: usize },
}

/// Coarse failure class, mapped to the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Io,
    Config,
    Data,
    Endpoint,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Io => 1,
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Endpoint => 4,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, source }
    }

    pub fn category(&self) -> ErrorCategory {
        use ErrorCategory::*;
        match self {
            Error::Io { .. } => Io,
            Error::Cohort(CohortError::Io { .. }) | Error::Registry(RegistryError::Io { .. }) => Io,
            Error::Index(IndexError::Io { .. }) | Error::Prompt(PromptError::Io { .. }) => Io,
            Error::Run(RunError::Io { .. }) => Io,
            Error::Config(_) | Error::Prompt(_) | Error::Bootstrap(BootstrapError::BadConfig) => Config,
            Error::Gateway(GatewayError::Config { .. }) | Error::Run(RunError::HeaderMismatch { .. }) => Config,
            Error::Cohort(CohortError::BadFractions(_)) => Config,
            Error::Gateway(_) | Error::CasesFailed { .. } => Endpoint,
            _ => Data,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.category().exit_code()
    }
}
