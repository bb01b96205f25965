//! Side-view block stacking: a velocity-controlled gripper point, a green
//! cube G and a yellow cube Y on a table.
//!
//! Coordinates are `(x, z)` in metres with the table at `z = 0`. An object's
//! position is its horizontal centre and its elevation above the table, so a
//! resting cube has `z = 0` and G stacked on Y has `G.z = Y.z + size`.
//!
//! Observation layout (14 values, metres and m/s):
//!
//! | index | content |
//! |-------|---------|
//! | 0-1   | TCP position |
//! | 2-3   | TCP velocity |
//! | 4     | gripper closure in [0, 1] |
//! | 5-6   | G position |
//! | 7-8   | Y position |
//! | 9-10  | G - TCP |
//! | 11-12 | Y - G |
//! | 13    | grasp flag (1 while holding an object) |
//!
//! Action (3 values in [-1, 1]): horizontal and vertical TCP velocity as a
//! fraction of `max_speed`, and the closing speed of the gripper. A cube is
//! attached once the closure exceeds 0.5 with the TCP within `grasp_radius`
//! of it, and released when the closure drops back to 0.5 or below.
//! Released cubes settle instantly on the table or on the other cube.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::rewards::{btol, slin, stol};
use super::{clip_unit, Environment, StepOutcome};

pub const OBS_DIM: usize = 14;
pub const ACTION_DIM: usize = 3;
const GREEN: usize = 0;
const YELLOW: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pile1Task {
    Reach,
    Grasp,
    Lift,
    PlaceWide,
    PlaceNarrow,
    Stack,
    StackAndLeave,
}

impl Pile1Task {
    pub const LADDER: [Pile1Task; 7] = [
        Pile1Task::Reach,
        Pile1Task::Grasp,
        Pile1Task::Lift,
        Pile1Task::PlaceWide,
        Pile1Task::PlaceNarrow,
        Pile1Task::Stack,
        Pile1Task::StackAndLeave,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pile1Task::Reach => "reach",
            Pile1Task::Grasp => "grasp",
            Pile1Task::Lift => "lift",
            Pile1Task::PlaceWide => "place_wide",
            Pile1Task::PlaceNarrow => "place_narrow",
            Pile1Task::Stack => "stack",
            Pile1Task::StackAndLeave => "stack_and_leave",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Pile1Config {
    /// Tasks in reward-vector order.
    pub tasks: Vec<Pile1Task>,
    pub episode_length: usize,
    /// Seconds per step.
    pub dt: f64,
    /// TCP speed at action magnitude 1, m/s.
    pub max_speed: f64,
    pub grasp_radius: f64,
    /// Seconds to close the gripper fully at action 1.
    pub close_time: f64,
    pub cube_size: f64,
    pub arena_x: [f64; 2],
    pub arena_z: [f64; 2],
    /// Horizontal range for cube placement at reset.
    pub spawn_x: [f64; 2],
    /// Height range for the TCP at reset.
    pub spawn_tcp_z: [f64; 2],
    /// Minimum horizontal distance between cube centres at reset.
    pub min_separation: f64,
}

impl Default for Pile1Config {
    fn default() -> Self {
        Self {
            tasks: Pile1Task::LADDER.to_vec(),
            episode_length: 600,
            dt: 0.05,
            max_speed: 0.5,
            grasp_radius: 0.02,
            close_time: 0.2,
            cube_size: 0.05,
            arena_x: [-0.2, 0.2],
            arena_z: [0.0, 0.25],
            spawn_x: [-0.15, 0.15],
            spawn_tcp_z: [0.05, 0.2],
            min_separation: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub tcp: [f64; 2],
    pub tcp_vel: [f64; 2],
    pub closure: f64,
    /// G then Y.
    pub objects: [[f64; 2]; 2],
    pub attached: Option<usize>,
}

impl WorldState {
    pub fn grasping(&self) -> bool {
        self.attached.is_some()
    }
}

pub struct Pile1 {
    config: Pile1Config,
    state: WorldState,
}

impl Pile1 {
    pub fn new(config: Pile1Config) -> Self {
        let state = WorldState {
            tcp: [0.0, 0.1],
            tcp_vel: [0.0; 2],
            closure: 0.0,
            objects: [[-0.1, 0.0], [0.1, 0.0]],
            attached: None,
        };
        Self { config, state }
    }

    pub fn config(&self) -> &Pile1Config {
        &self.config
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn set_state(&mut self, state: WorldState) {
        self.state = state;
    }

    /// Largest achievable return of any single task over one episode.
    pub fn max_return(&self) -> f64 {
        self.config.episode_length as f64
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.config.tasks.iter().map(|&t| task_reward(t, &self.state, &self.config)).collect()
    }

    fn overlap_x(&self, a: usize, b: usize) -> bool {
        (self.state.objects[a][0] - self.state.objects[b][0]).abs() < self.config.cube_size
    }

    fn settle(&mut self) {
        let size = self.config.cube_size;
        if let Some(k) = self.state.attached {
            let o = 1 - k;
            self.state.objects[k] = self.state.tcp;
            if self.overlap_x(k, o) {
                let dz = self.state.objects[k][1] - self.state.objects[o][1];
                if dz.abs() < size {
                    if dz >= 0.0 {
                        self.state.objects[k][1] = self.state.objects[o][1] + size;
                        self.state.tcp[1] = self.state.objects[k][1];
                    } else {
                        self.state.objects[o][1] = self.state.objects[k][1] + size;
                    }
                }
            }
        }
        let mut free: Vec<usize> = (0..2).filter(|&i| Some(i) != self.state.attached).collect();
        free.sort_by(|&a, &b| self.state.objects[a][1].total_cmp(&self.state.objects[b][1]));
        for i in free {
            let mut support = 0.0f64;
            for j in 0..2 {
                let top = self.state.objects[j][1] + size;
                if j != i && self.overlap_x(i, j) && top <= self.state.objects[i][1] + 1e-9 {
                    support = support.max(top);
                }
            }
            self.state.objects[i][1] = support;
        }
    }
}

/// Reward of one task in a given world state.
pub fn task_reward(task: Pile1Task, s: &WorldState, c: &Pile1Config) -> f64 {
    let g = s.objects[GREEN];
    let y = s.objects[YELLOW];
    let grasp = if s.grasping() { 1.0 } else { 0.0 };
    let place = (g[0] - y[0]).hypot(g[1] - (y[1] + c.cube_size));
    let stack = btol(g[0] - y[0], 0.03) * btol(y[1] - g[1] + c.cube_size, 0.01) * (1.0 - grasp);
    match task {
        Pile1Task::Reach => stol((s.tcp[0] - g[0]).hypot(s.tcp[1] - g[1]), 0.02, 0.15),
        Pile1Task::Grasp => grasp,
        Pile1Task::Lift => slin(g[1], 0.03, 0.10),
        Pile1Task::PlaceWide => stol(place, 0.01, 0.20),
        Pile1Task::PlaceNarrow => stol(place, 0.0, 0.01),
        Pile1Task::Stack => stack,
        Pile1Task::StackAndLeave => stol(g[1] - s.tcp[1] + 0.10, 0.03, 0.10) * stack,
    }
}

impl Environment for Pile1 {
    fn obs_dim(&self) -> usize {
        OBS_DIM
    }

    fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    fn num_tasks(&self) -> usize {
        self.config.tasks.len()
    }

    fn task_names(&self) -> Vec<String> {
        self.config.tasks.iter().map(|t| t.name().to_string()).collect()
    }

    fn episode_length(&self) -> usize {
        self.config.episode_length
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        let c = &self.config;
        let tcp = [rng.gen_range(c.arena_x[0]..=c.arena_x[1]), rng.gen_range(c.spawn_tcp_z[0]..=c.spawn_tcp_z[1])];
        let (gx, yx) = loop {
            let gx = rng.gen_range(c.spawn_x[0]..=c.spawn_x[1]);
            let yx = rng.gen_range(c.spawn_x[0]..=c.spawn_x[1]);
            if (gx - yx).abs() >= c.min_separation {
                break (gx, yx);
            }
        };
        self.state =
            WorldState { tcp, tcp_vel: [0.0; 2], closure: 0.0, objects: [[gx, 0.0], [yx, 0.0]], attached: None };
        self.observe()
    }

    fn observe(&self) -> Vec<f64> {
        let s = &self.state;
        let (g, y) = (s.objects[GREEN], s.objects[YELLOW]);
        vec![
            s.tcp[0],
            s.tcp[1],
            s.tcp_vel[0],
            s.tcp_vel[1],
            s.closure,
            g[0],
            g[1],
            y[0],
            y[1],
            g[0] - s.tcp[0],
            g[1] - s.tcp[1],
            y[0] - g[0],
            y[1] - g[1],
            if s.grasping() { 1.0 } else { 0.0 },
        ]
    }

    fn step(&mut self, action: &[f64]) -> StepOutcome {
        let c = self.config.clone();
        let a: Vec<f64> = (0..ACTION_DIM).map(|k| clip_unit(action.get(k).copied().unwrap_or(0.0))).collect();
        let old = self.state.tcp;
        self.state.tcp[0] = (old[0] + a[0] * c.max_speed * c.dt).clamp(c.arena_x[0], c.arena_x[1]);
        self.state.tcp[1] = (old[1] + a[1] * c.max_speed * c.dt).clamp(c.arena_z[0], c.arena_z[1]);
        self.state.closure = (self.state.closure + a[2] * c.dt / c.close_time).clamp(0.0, 1.0);

        match self.state.attached {
            Some(_) if self.state.closure <= 0.5 => self.state.attached = None,
            None if self.state.closure > 0.5 => {
                let tcp = self.state.tcp;
                let dist = |o: &[f64; 2]| (o[0] - tcp[0]).hypot(o[1] - tcp[1]);
                self.state.attached = (0..2)
                    .filter(|&i| dist(&self.state.objects[i]) < c.grasp_radius)
                    .min_by(|&i, &j| dist(&self.state.objects[i]).total_cmp(&dist(&self.state.objects[j])));
            }
            _ => {}
        }
        self.settle();
        let tcp = self.state.tcp;
        self.state.tcp_vel = [(tcp[0] - old[0]) / c.dt, (tcp[1] - old[1]) / c.dt];
        StepOutcome { obs: self.observe(), rewards: self.rewards(), terminal: false }
    }
}

/// Hand-written reactive controller that stacks G on Y and then lifts the
/// gripper clear.
#[derive(Clone, Debug)]
pub struct ScriptedStacker {
    config: Pile1Config,
}

impl ScriptedStacker {
    pub fn new(config: Pile1Config) -> Self {
        Self { config }
    }

    pub fn act(&self, s: &WorldState) -> Vec<f64> {
        let c = &self.config;
        let size = c.cube_size;
        let (g, y) = (s.objects[GREEN], s.objects[YELLOW]);
        let stacked = (g[0] - y[0]).abs() < 0.03 && (y[1] - g[1] + size).abs() < 0.01;
        let near = |p: [f64; 2], tol: f64| (p[0] - s.tcp[0]).hypot(p[1] - s.tcp[1]) < tol;
        let (target, grip) = match s.attached {
            None if stacked => ([g[0], g[1] + 0.10], -1.0),
            Some(GREEN) => {
                let place = [y[0], y[1] + size];
                if (g[0] - y[0]).abs() > 0.004 {
                    ([y[0], place[1] + 0.02], 1.0)
                } else if near(place, 0.002) {
                    (place, -1.0)
                } else {
                    (place, 1.0)
                }
            }
            Some(_) => (s.tcp, -1.0),
            None if near(g, 0.005) => (g, 1.0),
            None => (g, -1.0),
        };
        let step = c.max_speed * c.dt;
        vec![
            clip_unit((target[0] - s.tcp[0]) / step),
            clip_unit((target[1] - s.tcp[1]) / step),
            grip,
        ]
    }
}
