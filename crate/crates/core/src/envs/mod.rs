//! Analytic environments: a 2D block-stacking analog with the seven-task
//! Pile1 reward ladder, and a single-task point mass.

pub mod pile;
pub mod point_mass;
pub mod rewards;

use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use pile::{Pile1, Pile1Config, Pile1Task, ScriptedStacker, WorldState};
pub use point_mass::{PointMass, PointMassConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    /// Reward of every task for the transition.
    pub rewards: Vec<f64>,
    pub terminal: bool,
}

pub trait Environment: Send {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn num_tasks(&self) -> usize;
    fn task_names(&self) -> Vec<String>;
    fn episode_length(&self) -> usize;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn observe(&self) -> Vec<f64>;
    /// Actions outside [-1, 1] are clipped.
    fn step(&mut self, action: &[f64]) -> StepOutcome;
}

/// Serializable environment selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    Pile1(Pile1Config),
    PointMass(PointMassConfig),
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Pile1(Pile1Config::default())
    }
}

impl EnvSpec {
    pub fn build(&self) -> Box<dyn Environment> {
        match self {
            EnvSpec::Pile1(c) => Box::new(Pile1::new(c.clone())),
            EnvSpec::PointMass(c) => Box::new(PointMass::new(c.clone())),
        }
    }

    pub fn episode_length(&self) -> usize {
        match self {
            EnvSpec::Pile1(c) => c.episode_length,
            EnvSpec::PointMass(c) => c.episode_length,
        }
    }
}

pub(crate) fn clip_unit(a: f64) -> f64 {
    if a.is_nan() {
        0.0
    } else {
        a.clamp(-1.0, 1.0)
    }
}
