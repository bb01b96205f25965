//! Actors: run episodes under a policy snapshot with scheduled tasks and
//! record hindsight reward vectors and behavior log-densities.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rhpo_core::envs::{EnvSpec, Environment};
use rhpo_core::policy::Policy;
use rhpo_core::replay::{Episode, ReplayBuffer, Scheduler, TrajectoryStep};

use crate::RuntimeError;

/// One finished episode and what the actor observed while producing it.
#[derive(Clone, Debug)]
pub struct EpisodeReport {
    pub actor: usize,
    pub episode: Episode,
    /// Sum of each task's reward over the episode.
    pub returns: Vec<f64>,
    /// Component chosen at each step.
    pub components: Vec<usize>,
}

pub struct Actor {
    pub id: usize,
    env: Box<dyn Environment>,
    scheduler: Scheduler,
    rng: ChaCha8Rng,
}

/// Seed of actor `id` in a run with seed `seed`.
pub fn actor_seed(seed: u64, id: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1 + id as u64)
}

impl Actor {
    pub fn new(id: usize, env: &EnvSpec, schedule_period: usize, seed: u64) -> Self {
        let env = env.build();
        let scheduler = Scheduler::new(schedule_period, env.num_tasks());
        Self { id, env, scheduler, rng: ChaCha8Rng::seed_from_u64(actor_seed(seed, id)) }
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    /// One episode with tasks resampled every `ξ` steps.
    pub fn run_episode(&mut self, policy: &Policy) -> Result<EpisodeReport, RuntimeError> {
        let rng = &mut self.rng;
        let mut obs = self.env.reset(rng);
        let mut steps = Vec::with_capacity(self.env.episode_length());
        let mut returns = vec![0.0; self.env.num_tasks()];
        let mut components = Vec::with_capacity(self.env.episode_length());
        let mut terminal = false;
        for t in 0..self.env.episode_length() {
            let task = self.scheduler.next_task(t, rng);
            let act = policy.act(&obs, task, rng, true)?;
            let out = self.env.step(&act.action);
            for (acc, r) in returns.iter_mut().zip(&out.rewards) {
                *acc += r;
            }
            components.push(act.component);
            steps.push(TrajectoryStep {
                state: std::mem::replace(&mut obs, out.obs),
                action: act.action,
                rewards: out.rewards,
                behavior_log_prob: act.log_prob,
                executed_task: task,
            });
            if out.terminal {
                terminal = true;
                break;
            }
        }
        Ok(EpisodeReport { actor: self.id, episode: Episode { steps, final_state: obs, terminal }, returns, components })
    }
}

/// Return of `task` and the components used, for episodes that execute
/// that task throughout.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub mean_return: f64,
    pub component_counts: Vec<u64>,
}

pub fn evaluate(
    policy: &Policy,
    env: &mut dyn Environment,
    task: usize,
    episodes: usize,
    stochastic: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Evaluation, RuntimeError> {
    let mut counts = vec![0u64; policy.num_components()];
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        for _ in 0..env.episode_length() {
            let act = policy.act(&obs, task, rng, stochastic)?;
            counts[act.component] += 1;
            let out = env.step(&act.action);
            total += out.rewards[task];
            obs = out.obs;
            if out.terminal {
                break;
            }
        }
    }
    Ok(Evaluation { mean_return: total / episodes.max(1) as f64, component_counts: counts })
}

/// Latest published policy for asynchronous actors.
#[derive(Default)]
pub struct SnapshotSource {
    latest: RwLock<Option<(u64, Arc<Policy>)>>,
}

impl SnapshotSource {
    /// Atomically replaces the snapshot.
    pub fn publish(&self, version: u64, policy: Policy) {
        *self.latest.write().expect("snapshot lock") = Some((version, Arc::new(policy)));
    }

    pub fn latest(&self) -> Option<(u64, Arc<Policy>)> {
        self.latest.read().expect("snapshot lock").clone()
    }

    /// Waits with exponential backoff until a snapshot exists or `stop` is set.
    pub fn wait(&self, stop: &AtomicBool) -> Option<(u64, Arc<Policy>)> {
        let mut delay = Duration::from_micros(100);
        loop {
            if let Some(s) = self.latest() {
                return Some(s);
            }
            if stop.load(Ordering::Acquire) {
                return None;
            }
            std::thread::sleep(delay);
            delay = (delay * 2).min(Duration::from_millis(50));
        }
    }
}

/// Replay shared between actor threads and the learner.
pub struct ReplayService {
    buffer: Mutex<ReplayBuffer>,
}

impl ReplayService {
    pub fn new(buffer: ReplayBuffer) -> Self {
        Self { buffer: Mutex::new(buffer) }
    }

    pub fn append(&self, episode: &Episode) -> Result<usize, RuntimeError> {
        Ok(self.buffer.lock().expect("replay lock").append_episode(episode)?)
    }

    pub fn with<T>(&self, f: impl FnOnce(&ReplayBuffer) -> T) -> T {
        f(&self.buffer.lock().expect("replay lock"))
    }

    pub fn into_inner(self) -> ReplayBuffer {
        self.buffer.into_inner().expect("replay lock")
    }
}

/// What an asynchronous actor shares with the learner.
pub struct ActorLinks<'a> {
    pub source: &'a SnapshotSource,
    pub sink: &'a ReplayService,
    pub stop: &'a AtomicBool,
    /// Episodes delivered to replay.
    pub completed: &'a AtomicU64,
    /// Episodes started; with `max_episodes` this caps the total exactly.
    pub claimed: &'a AtomicU64,
    pub max_episodes: Option<u64>,
    pub reports: std::sync::mpsc::Sender<EpisodeReport>,
}

/// Asynchronous actor loop: fetch the latest snapshot, act one episode,
/// ship it to replay, repeat until `stop`. An episode that finishes after
/// `stop` is still delivered.
pub fn run_actor(mut actor: Actor, links: ActorLinks<'_>) -> Result<u64, RuntimeError> {
    let mut mine = 0;
    while !links.stop.load(Ordering::Acquire) {
        if links.max_episodes.is_some_and(|m| links.claimed.fetch_add(1, Ordering::AcqRel) >= m) {
            break;
        }
        let Some((_, policy)) = links.source.wait(links.stop) else { break };
        let report = actor.run_episode(&policy)?;
        links.sink.append(&report.episode)?;
        links.completed.fetch_add(1, Ordering::AcqRel);
        mine += 1;
        // The receiver may already be gone at shutdown; the episode is in
        // replay regardless.
        let _ = links.reports.send(report);
    }
    Ok(mine)
}
