//! Command errors and their process exit codes.

use rmstgst_core::adjusted_rmst::RmstError;
use rmstgst_core::gs_design::DesignError;
use rmstgst_core::numerics::RootError;
use rmstgst_core::sim_engine::SimError;
use rmstgst_core::stratified_cox::CoxError;
use rmstgst_core::trial_data::DataError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("convergence error: {0}")]
    Convergence(String),
    #[error("state error: {0}")]
    State(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Convergence(_) => 4,
            CliError::State(_) => 5,
            CliError::Io(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(io) => CliError::Io(io),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CoxError> for CliError {
    fn from(e: CoxError) -> Self {
        CliError::Convergence(e.to_string())
    }
}

impl From<RmstError> for CliError {
    fn from(e: RmstError) -> Self {
        match e {
            RmstError::InsufficientEvents { .. } => CliError::Data(e.to_string()),
            other => CliError::Convergence(other.to_string()),
        }
    }
}

impl From<DesignError> for CliError {
    fn from(e: DesignError) -> Self {
        match e {
            DesignError::NonIncreasingTime { .. } | DesignError::AlreadyRejected(_) => {
                CliError::State(e.to_string())
            }
            DesignError::Boundary { .. } => CliError::Convergence(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<RootError> for CliError {
    fn from(e: RootError) -> Self {
        CliError::Convergence(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Root(_) | SimError::NonMonotone { .. } | SimError::NoAnalyses(_) => {
                CliError::Convergence(e.to_string())
            }
            SimError::Design(d) => d.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}
