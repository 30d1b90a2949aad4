//! Experiment harness around the simulation core: config files, CLI
//! orchestration, CSV metrics and rounds-to-accuracy reports.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod report;
pub mod selftest;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("csv error: {0}")]
    Csv(String),
    #[error(transparent)]
    Run(#[from] flsim_core::flcore::RunError),
    #[error(transparent)]
    Data(#[from] flsim_core::data::DataError),
}
