//! The learner loop in its two execution modes.
//!
//! Output directory layout:
//!
//! ```text
//! config.toml            full experiment config
//! metrics.jsonl          one MetricsRecord per line
//! checkpoints/step_NNNNNNNNN.ckpt
//! ```

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rhpo_core::critic::QEnsemble;
use rhpo_core::improver::{ImproverError, Learner, StepDiagnostics};
use rhpo_core::policy::{Policy, PolicyKind};
use rhpo_core::replay::{ReplayBuffer, ReplayLayout, Snippet};

use crate::actor::{evaluate, run_actor, Actor, ActorLinks, EpisodeReport, ReplayService, SnapshotSource};
use crate::checkpoint::{learner_seed, load_policy, save_run};
use crate::config::{ExecutionMode, ExperimentConfig, TransferMode};
use crate::metrics::{DiagnosticsSummary, MetricsRecord, MetricsWriter, RecordKind};
use crate::RuntimeError;

pub struct RunSummary {
    pub out_dir: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub records: Vec<MetricsRecord>,
    pub actor_episodes: u64,
    pub learner_steps: u64,
    pub target_copies: u64,
    /// Per-task return of the last evaluation (`None` for tasks not evaluated).
    pub final_eval: Vec<Option<f64>>,
    pub learner: Learner,
    /// Episodes delivered to replay (equals `actor_episodes`).
    pub replay_episodes: u64,
}

impl RunSummary {
    pub fn eval_records(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.records.iter().filter(|r| r.kind == RecordKind::Eval)
    }

    /// Actor episodes at the first evaluation where `task` reached `threshold`.
    pub fn episodes_to_reach(&self, task: usize, threshold: f64) -> Option<u64> {
        self.eval_records()
            .find(|r| r.task_returns.get(task).copied().flatten().is_some_and(|v| v >= threshold))
            .map(|r| r.actor_episodes)
    }
}

/// Fresh or transferred policy for `config`.
pub fn build_policy(config: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<Policy, RuntimeError> {
    let fresh = config.policy_config();
    if config.transfer == TransferMode::None {
        return Ok(Policy::new(fresh, rng)?);
    }
    let path = config.pretrained.as_ref().ok_or_else(|| RuntimeError::Checkpoint("transfer needs `pretrained`".into()))?;
    let (mut pre, _) = load_policy(path)?;
    if pre.config().kind != PolicyKind::Hierarchical {
        return Err(RuntimeError::Checkpoint("pretrained policy is not hierarchical".into()));
    }
    if pre.config().obs_dim != fresh.obs_dim || pre.config().action_dim != fresh.action_dim {
        return Err(RuntimeError::Checkpoint("pretrained policy has different observation or action width".into()));
    }
    let start = pre.num_tasks();
    let mut added = Vec::new();
    for _ in 0..fresh.num_tasks {
        let task = match config.transfer {
            TransferMode::SequentialOnlyHl => pre.add_task_frozen_components(rng)?,
            _ => {
                if added.is_empty() {
                    pre.add_task_and_component(rng)?
                } else {
                    pre.add_task_frozen_components(rng)?
                }
            }
        };
        added.push(task);
    }
    debug_assert!(added.iter().all(|&t| t >= start));
    Ok(pre.select_tasks(&added)?)
}

pub fn build_learner(config: &ExperimentConfig) -> Result<Learner, RuntimeError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let policy = build_policy(config, &mut rng)?;
    let critic = QEnsemble::new(config.critic_config(), &mut rng)?;
    Ok(Learner::new(config.learner_config(), policy, critic, ChaCha8Rng::seed_from_u64(learner_seed(config.seed, 0))))
}

pub fn replay_for(config: &ExperimentConfig) -> ReplayBuffer {
    let env = config.env.build();
    let layout = ReplayLayout {
        obs_dim: env.obs_dim(),
        action_dim: env.action_dim(),
        num_tasks: env.num_tasks(),
        snippet_length: config.snippet_length,
    };
    ReplayBuffer::with_transition_capacity(layout, config.replay_transitions())
}

/// Trains per `config`, writing outputs under `out_dir`.
pub fn run_learner(config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary, RuntimeError> {
    config.validate()?;
    if config.run.updates_per_round == 0.0 && config.run.max_episodes.is_none() && config.learner_steps > 0 {
        return Err(crate::config::ConfigError::Invalid("updates_per_round = 0 needs max_episodes".into()).into());
    }
    std::fs::create_dir_all(out_dir.join("checkpoints"))?;
    config.save(&out_dir.join("config.toml"))?;
    let learner = build_learner(config)?;
    let mut ctx = RunContext::new(config, out_dir, learner)?;
    ctx.checkpoint()?;
    match config.run.mode {
        ExecutionMode::Deterministic => ctx.run_deterministic()?,
        ExecutionMode::Asynchronous => ctx.run_async()?,
    }
    ctx.finish()
}

struct RunContext<'a> {
    config: &'a ExperimentConfig,
    out_dir: PathBuf,
    learner: Learner,
    writer: MetricsWriter,
    records: Vec<MetricsRecord>,
    checkpoints: Vec<PathBuf>,
    episodes: u64,
    replay_episodes: u64,
    summary: DiagnosticsSummary,
    eval_rng: ChaCha8Rng,
    last_eval: Vec<Option<f64>>,
    next_eval: u64,
    started: Instant,
}

impl<'a> RunContext<'a> {
    fn new(config: &'a ExperimentConfig, out_dir: &Path, learner: Learner) -> Result<Self, RuntimeError> {
        Ok(Self {
            config,
            out_dir: out_dir.to_path_buf(),
            learner,
            writer: MetricsWriter::create(&out_dir.join("metrics.jsonl"))?,
            records: Vec::new(),
            checkpoints: Vec::new(),
            episodes: 0,
            replay_episodes: 0,
            summary: DiagnosticsSummary::default(),
            eval_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0xE7A1_0000),
            last_eval: Vec::new(),
            next_eval: config.run.eval_every,
            started: Instant::now(),
        })
    }

    fn wall_time(&self) -> f64 {
        match self.config.run.mode {
            ExecutionMode::Deterministic => 0.0,
            ExecutionMode::Asynchronous => self.started.elapsed().as_secs_f64(),
        }
    }

    fn record(&mut self, kind: RecordKind, task_returns: Vec<Option<f64>>) -> Result<(), RuntimeError> {
        let diagnostics = (self.summary.steps > 0).then(|| std::mem::take(&mut self.summary));
        let rec = MetricsRecord {
            kind,
            wall_time: self.wall_time(),
            learner_step: self.learner.steps(),
            actor_episodes: self.episodes,
            task_returns,
            diagnostics,
        };
        self.writer.write(&rec)?;
        self.records.push(rec);
        Ok(())
    }

    fn on_episode(&mut self, report: &EpisodeReport) -> Result<(), RuntimeError> {
        self.episodes += 1;
        self.record(RecordKind::Episode, report.returns.iter().map(|&r| Some(r)).collect())
    }

    fn budget_left(&self) -> bool {
        self.learner.steps() < self.config.learner_steps
            && self.config.run.max_episodes.map_or(true, |m| self.episodes < m)
    }

    fn checkpoint(&mut self) -> Result<(), RuntimeError> {
        let path = self.out_dir.join("checkpoints").join(format!("step_{:09}.ckpt", self.learner.steps()));
        save_run(&path, &self.learner, self.config, self.episodes)?;
        self.checkpoints.push(path);
        Ok(())
    }

    fn after_step(&mut self, result: Result<StepDiagnostics, ImproverError>) -> Result<(), RuntimeError> {
        let d = match result {
            Ok(d) => d,
            Err(ImproverError::NonFinite { what, step }) => {
                return Err(RuntimeError::Diverged { step, reason: format!("non-finite {what}"), diagnostics: None });
            }
            Err(e) => return Err(e.into()),
        };
        if !d.critic_loss.is_finite() || d.critic_loss > self.config.run.divergence_threshold {
            return Err(RuntimeError::Diverged {
                step: d.step,
                reason: format!("critic loss {} exceeds {}", d.critic_loss, self.config.run.divergence_threshold),
                diagnostics: Some(Box::new(d)),
            });
        }
        self.summary.add(&d);
        let every = self.config.run.checkpoint_every;
        if every > 0 && self.learner.steps() % every == 0 {
            self.checkpoint()?;
        }
        Ok(())
    }

    fn evaluate(&mut self) -> Result<(), RuntimeError> {
        let mut env = self.config.env.build();
        let n = env.num_tasks();
        let tasks = self.config.run.eval_tasks.clone().unwrap_or_else(|| (0..n).collect());
        let mut returns = vec![None; n];
        for task in tasks {
            let e = evaluate(
                &self.learner.policy,
                env.as_mut(),
                task,
                self.config.run.eval_episodes,
                self.config.run.eval_stochastic,
                &mut self.eval_rng,
            )?;
            returns[task] = Some(e.mean_return);
        }
        self.last_eval = returns.clone();
        self.record(RecordKind::Eval, returns)
    }

    fn maybe_evaluate(&mut self) -> Result<(), RuntimeError> {
        let every = self.config.run.eval_every;
        if every > 0 && self.episodes >= self.next_eval {
            self.evaluate()?;
            while self.next_eval <= self.episodes {
                self.next_eval += every;
            }
        }
        Ok(())
    }

    /// Rounds of one episode per actor under the current policy, then the
    /// accumulated share of learner steps.
    fn run_deterministic(&mut self) -> Result<(), RuntimeError> {
        let cfg = self.config;
        let mut actors: Vec<Actor> =
            (0..cfg.num_actors).map(|id| Actor::new(id, &cfg.env, cfg.schedule_period, cfg.seed)).collect();
        let mut replay = replay_for(cfg);
        let mut owed = 0.0;
        while self.budget_left() {
            for actor in &mut actors {
                let report = actor.run_episode(&self.learner.policy)?;
                replay.append_episode(&report.episode)?;
                self.replay_episodes += 1;
                self.on_episode(&report)?;
                if !self.budget_left() {
                    break;
                }
            }
            if replay.len() >= cfg.run.warmup_snippets.max(1) {
                owed += cfg.run.updates_per_round;
                while owed >= 1.0 && self.learner.steps() < cfg.learner_steps {
                    let r = self.learner.step(&replay);
                    self.after_step(r)?;
                    owed -= 1.0;
                }
            }
            self.maybe_evaluate()?;
        }
        Ok(())
    }

    /// Actor threads act on the latest published snapshot while this thread
    /// runs the learner; replay is the only shared mutable state.
    fn run_async(&mut self) -> Result<(), RuntimeError> {
        let cfg = self.config;
        let source = SnapshotSource::default();
        let sink = ReplayService::new(replay_for(cfg));
        let stop = AtomicBool::new(false);
        let completed = AtomicU64::new(0);
        let claimed = AtomicU64::new(0);
        let (tx, rx) = mpsc::channel::<EpisodeReport>();
        source.publish(0, self.learner.policy.clone());

        let outcome = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..cfg.num_actors)
                .map(|id| {
                    let actor = Actor::new(id, &cfg.env, cfg.schedule_period, cfg.seed);
                    let links = ActorLinks {
                        source: &source,
                        sink: &sink,
                        stop: &stop,
                        completed: &completed,
                        claimed: &claimed,
                        max_episodes: cfg.run.max_episodes,
                        reports: tx.clone(),
                    };
                    scope.spawn(move || run_actor(actor, links))
                })
                .collect();
            drop(tx);
            let learned = self.async_learner_loop(&source, &sink, &completed, &rx);
            stop.store(true, Ordering::Release);
            let mut worker_err = None;
            for h in handles {
                match h.join() {
                    Ok(Ok(_)) => {}
                    Ok(Err(e)) => worker_err = Some(e),
                    Err(_) => worker_err = Some(RuntimeError::Worker("actor thread panicked".into())),
                }
            }
            // Episodes that finished during shutdown.
            for report in rx.try_iter() {
                self.on_episode(&report)?;
            }
            learned?;
            worker_err.map_or(Ok(()), Err)
        });
        outcome?;
        self.replay_episodes = sink.with(|r| r.appended_episodes());
        debug_assert_eq!(self.replay_episodes, completed.load(Ordering::Acquire));
        Ok(())
    }

    fn async_learner_loop(
        &mut self,
        source: &SnapshotSource,
        sink: &ReplayService,
        completed: &AtomicU64,
        rx: &mpsc::Receiver<EpisodeReport>,
    ) -> Result<(), RuntimeError> {
        let cfg = self.config;
        let warm = cfg.run.warmup_snippets.max(1);
        let mut idle = std::time::Duration::from_micros(100);
        loop {
            for report in rx.try_iter() {
                self.on_episode(&report)?;
            }
            self.maybe_evaluate()?;
            let episodes_done = cfg.run.max_episodes.is_some_and(|m| completed.load(Ordering::Acquire) >= m);
            if self.learner.steps() >= cfg.learner_steps || episodes_done {
                return Ok(());
            }
            if sink.with(|r| r.len()) < warm {
                std::thread::sleep(idle);
                idle = (idle * 2).min(std::time::Duration::from_millis(20));
                continue;
            }
            let batch = sink.with(|r| self.learner.sample_batch(r))?;
            let refs: Vec<&Snippet> = batch.iter().map(|s| s.as_ref()).collect();
            let r = self.learner.step_on(&refs);
            self.after_step(r)?;
            source.publish(self.learner.steps(), self.learner.policy.clone());
        }
    }

    fn finish(mut self) -> Result<RunSummary, RuntimeError> {
        let steps = self.learner.steps();
        if steps > 0 && self.checkpoints.last().map_or(true, |p| !p.ends_with(format!("step_{steps:09}.ckpt"))) {
            self.checkpoint()?;
        }
        if self.config.run.eval_every > 0 && self.records.last().map_or(true, |r| r.kind != RecordKind::Eval) {
            self.evaluate()?;
        }
        self.writer.flush()?;
        Ok(RunSummary {
            out_dir: self.out_dir,
            checkpoints: self.checkpoints,
            records: self.records,
            actor_episodes: self.episodes,
            learner_steps: steps,
            target_copies: self.learner.critic.copies(),
            final_eval: self.last_eval,
            learner: self.learner,
            replay_episodes: self.replay_episodes,
        })
    }
}
