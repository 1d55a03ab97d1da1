use std::path::Path;

/// Failure of a CLI run, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, configuration or inputs: exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while running a valid request: exit code 2.
    #[error("{0}")]
    Runtime(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    /// An input that could not be read is the caller's problem.
    pub(crate) fn missing(path: &Path, e: std::io::Error) -> Self {
        CliError::Validation(format!("cannot read {}: {e}", path.display()))
    }
}

/// Core errors raised on user-supplied settings are validation errors;
/// everything else (non-finite values, numerical breakdown) is a runtime
/// failure.
impl From<recfm_core::Error> for CliError {
    fn from(e: recfm_core::Error) -> Self {
        match e {
            recfm_core::Error::InvalidArgument(_) | recfm_core::Error::ShapeMismatch { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}
