//! Single-task point mass: move to a random goal with bounded velocity.
//!
//! Observation: position (`dim` values) then goal minus position (`dim`
//! values), in metres. Action: velocity per axis as a fraction of
//! `max_speed`. Reward: `stol(|goal - position|, tolerance, radius)`.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::rewards::stol;
use super::{clip_unit, Environment, StepOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointMassConfig {
    pub dim: usize,
    pub episode_length: usize,
    pub dt: f64,
    pub max_speed: f64,
    /// Positions and goals live in `[-bound, bound]` per axis.
    pub bound: f64,
    pub tolerance: f64,
    pub radius: f64,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self { dim: 1, episode_length: 100, dt: 0.05, max_speed: 1.0, bound: 1.0, tolerance: 0.05, radius: 0.5 }
    }
}

pub struct PointMass {
    config: PointMassConfig,
    pos: Vec<f64>,
    goal: Vec<f64>,
}

impl PointMass {
    pub fn new(config: PointMassConfig) -> Self {
        let d = config.dim;
        Self { config, pos: vec![0.0; d], goal: vec![0.0; d] }
    }

    pub fn position(&self) -> &[f64] {
        &self.pos
    }

    pub fn goal(&self) -> &[f64] {
        &self.goal
    }

    fn reward(&self) -> f64 {
        let d = self.pos.iter().zip(&self.goal).map(|(p, g)| (g - p) * (g - p)).sum::<f64>().sqrt();
        stol(d, self.config.tolerance, self.config.radius)
    }

    /// Moves straight at the goal at full speed, then holds.
    pub fn scripted_action(&self) -> Vec<f64> {
        let step = self.config.max_speed * self.config.dt;
        self.pos.iter().zip(&self.goal).map(|(p, g)| clip_unit((g - p) / step)).collect()
    }
}

impl Environment for PointMass {
    fn obs_dim(&self) -> usize {
        2 * self.config.dim
    }

    fn action_dim(&self) -> usize {
        self.config.dim
    }

    fn num_tasks(&self) -> usize {
        1
    }

    fn task_names(&self) -> Vec<String> {
        vec!["reach_goal".to_string()]
    }

    fn episode_length(&self) -> usize {
        self.config.episode_length
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        let b = self.config.bound;
        for k in 0..self.config.dim {
            self.pos[k] = rng.gen_range(-b..=b);
            self.goal[k] = rng.gen_range(-b..=b);
        }
        self.observe()
    }

    fn observe(&self) -> Vec<f64> {
        let mut obs = self.pos.clone();
        obs.extend(self.pos.iter().zip(&self.goal).map(|(p, g)| g - p));
        obs
    }

    fn step(&mut self, action: &[f64]) -> StepOutcome {
        let c = &self.config;
        for k in 0..c.dim {
            let a = clip_unit(action.get(k).copied().unwrap_or(0.0));
            self.pos[k] = (self.pos[k] + a * c.max_speed * c.dt).clamp(-c.bound, c.bound);
        }
        StepOutcome { obs: self.observe(), rewards: vec![self.reward()], terminal: false }
    }
}
