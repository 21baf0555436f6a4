use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data format error: {0}")]
    Data(rotq::Error),

    #[error("runtime error: {0}")]
    Runtime(rotq::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub fn to_exit(&self) -> ExitCode {
        ExitCode::from(self.exit_code())
    }
}

impl From<rotq::Error> for CliError {
    fn from(e: rotq::Error) -> Self {
        if e.is_data_format() {
            CliError::Data(e)
        } else {
            CliError::Runtime(e)
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(rotq::Error::Io(e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
