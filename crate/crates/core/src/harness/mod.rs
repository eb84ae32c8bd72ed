//! Experiment plumbing: metrics, configuration, self-checks and the drivers
//! behind the CLI.

use thiserror::Error;

use crate::graph::GraphError;
use crate::metalearner::MetaError;

pub mod checks;
pub mod config;
pub mod experiments;
pub mod metrics;
pub mod probe;

pub use config::{Config, ConfigError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("check failed: {0}")]
    Check(String),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 1,
        }
    }
}

impl From<crate::adcore::AdError> for HarnessError {
    fn from(e: crate::adcore::AdError) -> Self {
        HarnessError::Meta(e.into())
    }
}
