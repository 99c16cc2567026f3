use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] agssp_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("overlay: {0}")]
    Overlay(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    /// 2 for bad input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        let validation = match self {
            CliError::Core(e) => e.is_validation(),
            CliError::Usage(_) | CliError::Overlay(_) => true,
            CliError::Io(..) | CliError::Internal(_) => false,
        };
        if validation {
            2
        } else {
            1
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

macro_rules! via_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

via_core!(
    agssp_core::tensorio::TensorError,
    agssp_core::tensorio::ManifestError,
    agssp_core::kead::KeadError,
    agssp_core::distill::DistillError,
    agssp_core::pseudolabel::PseudoLabelError,
    agssp_core::metrics::MetricsError
);
