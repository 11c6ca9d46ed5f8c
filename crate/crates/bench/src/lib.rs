//! Benchmark plants, baselines, experiment drivers and the command line tool
//! for closed-loop MPC tuning.

pub mod baselines;
pub mod cli;
pub mod config;
pub mod experiment;
pub mod plants;
pub mod riccati;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl BenchError {
    /// Process exit status: 2 for configuration errors, 3 for numerical
    /// failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Numerical(_) => 3,
            Self::Io(_) => 1,
        }
    }
}
