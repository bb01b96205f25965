//! Learner checkpoints: policy, target policy, critic and its target, duals.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rhpo_core::critic::{CriticConfig, QEnsemble};
use rhpo_core::diffmath::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointDtype};
use rhpo_core::improver::{DualState, Learner};
use rhpo_core::policy::{Policy, PolicyConfig};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::RuntimeError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ExperimentConfig,
    pub policy_config: PolicyConfig,
    pub critic_config: CriticConfig,
    pub learner_steps: u64,
    pub actor_episodes: u64,
    pub target_copies: u64,
}

pub struct RunCheckpoint {
    pub meta: CheckpointMeta,
    pub learner: Learner,
}

/// Seed for the learner generator after `steps` steps of a run. Resumed
/// runs continue from here rather than from the exact stream position.
pub fn learner_seed(seed: u64, steps: u64) -> u64 {
    seed ^ 0x5EED_1EA7_0000_0000 ^ steps.rotate_left(17)
}

pub fn save_run(path: &Path, learner: &Learner, config: &ExperimentConfig, actor_episodes: u64) -> Result<(), RuntimeError> {
    let meta = CheckpointMeta {
        config: config.clone(),
        policy_config: learner.policy.config().clone(),
        critic_config: learner.critic.config().clone(),
        learner_steps: learner.steps(),
        actor_episodes,
        target_copies: learner.critic.copies(),
    };
    let ckpt = Checkpoint::new(serde_json::to_value(&meta)?)
        .with_store("policy", &learner.policy.params)
        .with_store("target_policy", &learner.target_policy.params)
        .with_store("critic", &learner.critic.params)
        .with_store("critic_target", learner.critic.target())
        .with_store("duals", &learner.duals.params);
    save_checkpoint(path, &ckpt, CheckpointDtype::F64, true)?;
    Ok(())
}

pub fn load_run(path: &Path) -> Result<RunCheckpoint, RuntimeError> {
    let ckpt = load_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ckpt.metadata.clone())?;
    let take = |name: &str| ckpt.store(name).cloned();
    let policy = Policy::from_parts(meta.policy_config.clone(), take("policy")?);
    let target_policy = Policy::from_parts(meta.policy_config.clone(), take("target_policy")?);
    let critic = QEnsemble::from_parts(meta.critic_config.clone(), take("critic")?, take("critic_target")?, meta.target_copies);
    let learner_config = meta.config.learner_config();
    let duals = DualState::from_params(take("duals")?, learner_config.improver.dual_floor);
    let mut learner = Learner::new(learner_config, policy, critic, ChaCha8Rng::seed_from_u64(0));
    learner.target_policy = target_policy;
    learner.duals = duals;
    learner.restore_progress(meta.learner_steps, ChaCha8Rng::seed_from_u64(learner_seed(meta.config.seed, meta.learner_steps)));
    Ok(RunCheckpoint { meta, learner })
}

/// Policy stored in a checkpoint.
pub fn load_policy(path: &Path) -> Result<(Policy, CheckpointMeta), RuntimeError> {
    let ckpt = load_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ckpt.metadata.clone())?;
    let policy = Policy::from_parts(meta.policy_config.clone(), ckpt.store("policy")?.clone());
    Ok((policy, meta))
}
