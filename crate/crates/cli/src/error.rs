use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config keys or paths; nothing was computed.
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error(transparent)]
    Runtime(fusionseg::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<CliError> for ExitCode {
    fn from(e: CliError) -> Self {
        ExitCode::from(e.exit_code())
    }
}

impl From<fusionseg::Error> for CliError {
    fn from(e: fusionseg::Error) -> Self {
        match e {
            fusionseg::Error::Config { key, msg } => CliError::Validation(format!("{key}: {msg}")),
            fusionseg::Error::ConfigMismatch(msg) => CliError::Validation(msg),
            other => CliError::Runtime(other),
        }
    }
}
