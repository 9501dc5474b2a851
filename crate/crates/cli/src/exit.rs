use std::fmt;

use tpdm_core::Error;

/// Process exit status for each failure class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Failure = 1,
    Config = 2,
    MissingInput = 3,
    Divergence = 4,
    Shape = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl CliError {
    pub fn new(code: ExitCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Domain(_) | Error::Feasibility(_) | Error::Json(_) => {
                ExitCode::Config
            }
            Error::EmptyInput(_) => ExitCode::MissingInput,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => ExitCode::MissingInput,
            Error::Divergence { .. } => ExitCode::Divergence,
            Error::Dimension(_) => ExitCode::Shape,
            _ => ExitCode::Failure,
        };
        let message = match &e {
            Error::Divergence { step } => format!("sampling diverged at step index {step}"),
            _ => e.to_string(),
        };
        CliError::new(code, message)
    }
}

/// Attaches the offending path to an input error.
pub fn with_path<T>(r: tpdm_core::Result<T>, path: &std::path::Path) -> Result<T, CliError> {
    r.map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    })
}
