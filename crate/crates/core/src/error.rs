use thiserror::Error;

/// Errors produced by the library.
///
/// The CLI maps these onto process exit codes via [`Error::exit_code`]:
/// argument/state problems exit 2, data/parse problems exit 3, and
/// numerical/convergence problems exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An operation was invoked on a value in the wrong state, e.g. a
    /// feature-dependent noise spec that has not been calibrated.
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("calibration did not converge: {0}")]
    Convergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_) | Error::InvalidState(_) => 2,
            Error::Parse { .. } | Error::Io(_) | Error::Json(_) => 3,
            Error::Numerical(_) | Error::Convergence(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_param(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
