//! Command implementations behind the `qdp` binary.

pub mod commands;
pub mod config;
pub mod train;
pub mod verify;

use qdp::env::EnvError;
use qdp::net::NetError;
use qdp::sdqn::SdqnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("{0}")]
    Other(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 0 is success; each failure family has its own code.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Checkpoint(_) => 3,
            CliError::Verify(_) => 4,
            CliError::Other(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::InvalidConfig(m) => CliError::Config(m),
            EnvError::Net(n) => n.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::InvalidConfig(m) => CliError::Config(m),
            NetError::Checkpoint(m) => CliError::Checkpoint(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<SdqnError> for CliError {
    fn from(e: SdqnError) -> Self {
        match e {
            SdqnError::InvalidConfig(m) => CliError::Config(m),
            SdqnError::Net(n) => n.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}
