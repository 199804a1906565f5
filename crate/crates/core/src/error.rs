use thiserror::Error;

/// Errors raised across the crate.
///
/// The variants map onto the CLI's exit-code categories: `Shape` and
/// `Contract` are caller mistakes, `Numeric` is a NaN/Inf surfacing inside a
/// computation, and `Format`/`Io`/`Wav` are file-level failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Broad category used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Shape { .. } | Error::Contract(_) => ErrorCategory::Contract,
            Error::Numeric(_) => ErrorCategory::Numeric,
            Error::Format(_) | Error::Io(_) | Error::Wav(_) => ErrorCategory::Io,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Contract,
    Numeric,
    Io,
}
