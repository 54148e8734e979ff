//! Library surface of the experiment CLI, split out so integration tests can
//! drive the pipeline directly.

use thiserror::Error;

pub mod config;
pub mod output;
pub mod pipeline;

/// Process exit codes: 0 ok, 2 certification failure, 3 run failure,
/// 1 anything else (usage, schema, io).
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config field {field}: {message}")]
    Field { field: String, message: String },
    #[error("config error: {0}")]
    Schema(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(
        "support failed certification: max rho = {max_rho:.6}, \
         {dare_failures} gain solve failure(s) over {pairs_checked} pairs"
    )]
    Certification {
        max_rho: f64,
        dare_failures: usize,
        pairs_checked: usize,
    },
    #[error("run failure: {0}")]
    Run(String),
}

impl CliError {
    pub fn field(field: &str, message: String) -> Self {
        Self::Field {
            field: field.to_string(),
            message,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Certification { .. } => 2,
            CliError::Run(_) => 3,
            _ => 1,
        }
    }
}
