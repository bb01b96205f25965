//! Training runtime: experiment configuration, actor/learner orchestration,
//! checkpoints, metrics, ablation grids, similarity analysis and plots.

pub mod ablation;
pub mod actor;
pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod curves;
pub mod metrics;
pub mod train;

pub use rhpo_core;

use rhpo_core::critic::CriticError;
use rhpo_core::diffmath::DiffError;
use rhpo_core::distributions::DistError;
use rhpo_core::improver::{ImproverError, StepDiagnostics};
use rhpo_core::policy::PolicyError;
use rhpo_core::replay::ReplayError;

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("learner diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String, diagnostics: Option<Box<StepDiagnostics>> },
    #[error("checkpoint {0}")]
    Checkpoint(String),
    #[error("actor worker failed: {0}")]
    Worker(String),
    #[error(transparent)]
    Improver(#[from] ImproverError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("plot: {0}")]
    Plot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
