//! Stage failures and the exit codes they map to.

use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, missing or malformed inputs, invalid configuration.
    #[error("{0}")]
    Usage(String),
    #[error("{stage}: {cause:#}")]
    Analysis { stage: &'static str, cause: anyhow::Error },
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Analysis { .. } => 2,
            CliError::Verification(_) => 3,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    /// One machine-readable line: `error CODE STAGE: message`.
    pub fn report_line(&self) -> String {
        let stage = match self {
            CliError::Usage(_) => "usage",
            CliError::Analysis { stage, .. } => stage,
            CliError::Verification(_) => "verify",
        };
        format!("error {} {stage}: {}", self.code(), self.to_string().replace('\n', " "))
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Wraps a stage failure.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> StageContext<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Analysis { stage, cause: e.into() })
    }
}

pub type CliResult<T> = Result<T, CliError>;
