//! Command surface of the `ensemble-patch` tool: run configuration, patch
//! generation, evaluation, theory checks and synthetic scene rendering.

pub mod commands;
pub mod config;

pub use commands::{cmd_eval, cmd_generate, cmd_make_scenes, cmd_verify_theory, GenerateSummary};
pub use config::{DetectorConfig, EnsembleConfig, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, missing or malformed input.
    #[error("{0}")]
    Input(String),

    #[error(transparent)]
    Core(#[from] ensemble_patch::Error),

    /// The command ran but a check it performs did not hold.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 for configuration and input problems, 3 for numeric failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(ensemble_patch::Error::Numeric { .. }) | CliError::Failed(_) => 3,
            CliError::Input(_) | CliError::Core(_) => 2,
        }
    }
}
