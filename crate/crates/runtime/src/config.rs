//! Experiment configuration. Defaults follow the multitask hyperparameter
//! table with the Pile1 batch size; [`ExperimentConfig::single_task`] gives
//! the single-task table.

use std::path::{Path, PathBuf};

use rhpo_core::critic::{CriticConfig, RetraceConfig};
use rhpo_core::envs::{EnvSpec, PointMassConfig};
use rhpo_core::improver::{ImproverConfig, LearnerConfig, MStepForm, PolicyOptimizer, WeightNormalization};
use rhpo_core::policy::{InitScheme, PolicyConfig, PolicyKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("writing config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Rhpo,
    SacuMonolithic,
    SacuIndependent,
    SacuSvg,
    RhpoSvg,
}

impl Algorithm {
    pub fn policy_kind(self) -> PolicyKind {
        match self {
            Algorithm::Rhpo | Algorithm::RhpoSvg => PolicyKind::Hierarchical,
            Algorithm::SacuMonolithic => PolicyKind::Monolithic,
            Algorithm::SacuIndependent | Algorithm::SacuSvg => PolicyKind::Independent,
        }
    }

    pub fn optimizer(self) -> PolicyOptimizer {
        match self {
            Algorithm::SacuSvg | Algorithm::RhpoSvg => PolicyOptimizer::Svg,
            _ => PolicyOptimizer::Mpo,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    #[default]
    None,
    /// Frozen pretrained torso and components, new high-level controller.
    SequentialOnlyHl,
    /// As above plus one new trainable component.
    Sequential,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Serial actor/learner interleaving, bitwise reproducible.
    #[default]
    Deterministic,
    /// Actor threads and a learner thread over a shared replay.
    Asynchronous,
}

/// Layer widths. `None` picks the table value for the policy kind.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub policy_torso: Option<Vec<usize>>,
    pub policy_head: Option<Vec<usize>>,
    pub critic_torso: Option<Vec<usize>>,
    pub critic_head: Option<Vec<usize>>,
    pub layer_norm_tanh: bool,
}

/// How the run is driven: interleaving, budgets, evaluation and outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: ExecutionMode,
    /// Deterministic mode: learner steps after each round of one episode
    /// per actor. Fractions accumulate across rounds.
    pub updates_per_round: f64,
    /// Snippets in replay before the learner starts.
    pub warmup_snippets: usize,
    /// Stop once this many actor episodes have finished.
    pub max_episodes: Option<u64>,
    /// Learner steps between checkpoints (0 = only initial and final).
    pub checkpoint_every: u64,
    /// Actor episodes between evaluations (0 = no evaluation).
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Tasks to evaluate; `None` evaluates all.
    pub eval_tasks: Option<Vec<usize>>,
    /// Sample actions during evaluation instead of using the mean of the
    /// most likely component.
    pub eval_stochastic: bool,
    /// Halt when the mean critic loss exceeds this (divergence detector).
    pub divergence_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: ExecutionMode::Deterministic,
            updates_per_round: 1.0,
            warmup_snippets: 1,
            max_episodes: None,
            checkpoint_every: 10_000,
            eval_every: 0,
            eval_episodes: 1,
            eval_tasks: None,
            eval_stochastic: true,
            divergence_threshold: 1e8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub num_actors: usize,
    /// Learner steps (`N_steps`).
    pub learner_steps: u64,
    /// Learner steps between target copies (`N_targetUpdate`).
    pub target_period: u64,
    /// Actions sampled per state (`N_s`).
    pub action_samples: usize,
    pub epsilon: f64,
    pub eps_mean: f64,
    pub eps_cov: f64,
    pub eps_cat: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub dual_learning_rate: f64,
    /// Snippets per learner batch.
    pub batch_size: usize,
    /// Retrace snippet length `L`.
    pub snippet_length: usize,
    /// Number of components `M`; `None` uses the number of tasks.
    pub components: Option<usize>,
    /// Task switching period `ξ` in steps.
    pub schedule_period: usize,
    /// Replay capacity in transitions; `None` uses 1e6 per task
    /// (2e6 for a single task).
    pub replay_capacity: Option<usize>,
    pub init: InitScheme,
    pub transfer: TransferMode,
    /// Checkpoint to transfer from.
    pub pretrained: Option<PathBuf>,
    pub mstep: MStepForm,
    pub weight_normalization: WeightNormalization,
    pub svg_kl_weight: f64,
    pub gumbel_temperature: f64,
    pub straight_through: bool,
    pub env: EnvSpec,
    pub network: NetworkConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let imp = ImproverConfig::default();
        Self {
            algorithm: Algorithm::Rhpo,
            seed: 0,
            num_actors: 5,
            learner_steps: 1_000_000,
            target_period: 500,
            action_samples: 20,
            epsilon: imp.epsilon,
            eps_mean: imp.eps_mean,
            eps_cov: imp.eps_cov,
            eps_cat: imp.eps_cat,
            gamma: 0.99,
            learning_rate: 2e-4,
            dual_learning_rate: imp.dual_lr,
            batch_size: 512,
            snippet_length: 10,
            components: None,
            schedule_period: 150,
            replay_capacity: None,
            init: InitScheme::Homogeneous,
            transfer: TransferMode::None,
            pretrained: None,
            mstep: imp.mstep,
            weight_normalization: imp.normalization,
            svg_kl_weight: imp.svg_kl_weight,
            gumbel_temperature: imp.gumbel_temperature,
            straight_through: imp.straight_through,
            env: EnvSpec::default(),
            network: NetworkConfig { layer_norm_tanh: true, ..NetworkConfig::default() },
            run: RunConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Single-task table: 10 action samples, target period 250, batch 256,
    /// three components, 200-200-200 policy and 500-500-500 critic.
    pub fn single_task() -> Self {
        Self {
            action_samples: 10,
            target_period: 250,
            batch_size: 256,
            components: Some(3),
            env: EnvSpec::PointMass(PointMassConfig::default()),
            network: NetworkConfig {
                policy_torso: Some(vec![200, 200]),
                policy_head: Some(vec![200]),
                critic_torso: Some(vec![500, 500]),
                critic_head: Some(vec![500]),
                layer_norm_tanh: true,
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml()?).map_err(|source| ConfigError::Io { path: path.into(), source })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.num_actors == 0 {
            return bad("num_actors must be at least 1");
        }
        if self.batch_size == 0 || self.snippet_length == 0 || self.action_samples == 0 {
            return bad("batch_size, snippet_length and action_samples must be positive");
        }
        if self.target_period == 0 || self.schedule_period == 0 {
            return bad("target_period and schedule_period must be positive");
        }
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("eps_mean", self.eps_mean),
            ("eps_cov", self.eps_cov),
            ("eps_cat", self.eps_cat),
            ("learning_rate", self.learning_rate),
            ("gumbel_temperature", self.gumbel_temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.components == Some(0) {
            return bad("components must be positive");
        }
        if self.run.updates_per_round < 0.0 {
            return bad("updates_per_round must be non-negative");
        }
        if self.transfer != TransferMode::None {
            if self.algorithm.policy_kind() != PolicyKind::Hierarchical {
                return bad("transfer needs a hierarchical policy");
            }
            if self.pretrained.is_none() {
                return bad("transfer needs a pretrained checkpoint");
            }
        }
        if let Some(tasks) = &self.run.eval_tasks {
            let n = self.env.build().num_tasks();
            if tasks.iter().any(|&t| t >= n) {
                return bad("eval_tasks out of range");
            }
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.env.build().num_tasks()
    }

    pub fn components_or_default(&self) -> usize {
        self.components.unwrap_or_else(|| self.num_tasks())
    }

    pub fn replay_transitions(&self) -> usize {
        self.replay_capacity.unwrap_or_else(|| match self.num_tasks() {
            1 => 2_000_000,
            n => 1_000_000 * n,
        })
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let env = self.env.build();
        let kind = self.algorithm.policy_kind();
        let (obs, act, tasks) = (env.obs_dim(), env.action_dim(), env.num_tasks());
        let m = match kind {
            PolicyKind::Hierarchical => self.components_or_default(),
            _ => 1,
        };
        let default_head = match kind {
            PolicyKind::Monolithic => vec![200],
            _ => vec![100],
        };
        PolicyConfig {
            kind,
            components: m,
            max_components: m + 1,
            torso: self.network.policy_torso.clone().unwrap_or_else(|| vec![400, 200]),
            head_hidden: self.network.policy_head.clone().unwrap_or(default_head),
            layer_norm_tanh: self.network.layer_norm_tanh,
            init: self.init,
            ..PolicyConfig::multitask(obs, act, tasks)
        }
    }

    pub fn critic_config(&self) -> CriticConfig {
        let env = self.env.build();
        CriticConfig {
            torso: self.network.critic_torso.clone().unwrap_or_else(|| vec![400, 400]),
            head_hidden: self.network.critic_head.clone().unwrap_or_else(|| vec![300]),
            layer_norm_tanh: self.network.layer_norm_tanh,
            ..CriticConfig::multitask(env.obs_dim(), env.action_dim(), env.num_tasks())
        }
    }

    pub fn improver_config(&self) -> ImproverConfig {
        ImproverConfig {
            optimizer: self.algorithm.optimizer(),
            mstep: self.mstep,
            normalization: self.weight_normalization,
            epsilon: self.epsilon,
            eps_mean: self.eps_mean,
            eps_cov: self.eps_cov,
            eps_cat: self.eps_cat,
            samples: self.action_samples,
            dual_lr: self.dual_learning_rate,
            svg_kl_weight: self.svg_kl_weight,
            gumbel_temperature: self.gumbel_temperature,
            straight_through: self.straight_through,
            ..ImproverConfig::default()
        }
    }

    pub fn learner_config(&self) -> LearnerConfig {
        LearnerConfig {
            improver: self.improver_config(),
            retrace: RetraceConfig { length: self.snippet_length, gamma: self.gamma, samples: self.action_samples },
            batch_size: self.batch_size,
            policy_lr: self.learning_rate,
            critic_lr: self.learning_rate,
            target_period: self.target_period,
        }
    }
}
