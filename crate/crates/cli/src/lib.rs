//! Experiment runner behind the `fedsim` binary.
//!
//! [`run::run_standalone`] and [`run::run_simulate`] run a whole experiment
//! in one process; [`run::run_server`], [`run::run_client`] and
//! [`run::run_scheduler`] host one role each over TCP.

use fedsim::data::DataError;
use fedsim::partition::PartitionError;
use fedsim::protocol::ProtocolError;
use fedsim::trainer::TrainError;
use fedsim::transport::TransportError;
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod metrics;
pub mod run;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("transport error: {0}")]
    Transport(#[from] TransportError),
    #[error("protocol error: {0}")]
    Protocol(ProtocolError),
}

impl CliError {
    /// Process exit status: 1 configuration or input problems, 2 transport
    /// failures, 3 protocol aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Data(_) | CliError::Io(_) => 1,
            CliError::Transport(_) => 2,
            CliError::Protocol(_) => 3,
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Transport(t) => CliError::Transport(t),
            other => CliError::Protocol(other),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PartitionError> for CliError {
    fn from(e: PartitionError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Config(e.to_string())
    }
}
