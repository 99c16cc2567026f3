use thiserror::Error;

use crate::distill::DistillError;
use crate::kead::KeadError;
use crate::metrics::MetricsError;
use crate::pseudolabel::PseudoLabelError;
use crate::tensorio::{ManifestError, TensorError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-wide error, qualified by the module that raised it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tensorio: {0}")]
    Tensor(#[from] TensorError),
    #[error("tensorio: {0}")]
    Manifest(#[from] ManifestError),
    #[error("kead: {0}")]
    Kead(#[from] KeadError),
    #[error("distill: {0}")]
    Distill(#[from] DistillError),
    #[error("pseudolabel: {0}")]
    PseudoLabel(#[from] PseudoLabelError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True when the error stems from bad input rather than an internal or
    /// environmental failure. The CLI maps this to exit code 2.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. }
                | Error::Tensor(TensorError::Io { .. })
                | Error::Manifest(ManifestError::Io { .. })
        )
    }
}
