//! Multitask Q-function with one head per task, a frozen target copy, and
//! retrace targets computed from replayed snippets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{linear, DiffError, Init, Linear, ParamStore, Tape, Tensor, Var};
use crate::distributions::batched::mixture_log_prob;
use crate::policy::{Policy, PolicyError};
use crate::replay::Snippet;

#[derive(Debug, thiserror::Error)]
pub enum CriticError {
    #[error("task {task} out of range for {tasks} tasks")]
    TaskOutOfRange { task: usize, tasks: usize },
    #[error("snippet step {step} has no finite behavior log-probability")]
    MissingBehavior { step: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub num_tasks: usize,
    pub torso: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub layer_norm_tanh: bool,
}

impl CriticConfig {
    /// Torso 400-400, one 300-unit hidden layer per task head.
    pub fn multitask(obs_dim: usize, action_dim: usize, num_tasks: usize) -> Self {
        Self { obs_dim, action_dim, num_tasks, torso: vec![400, 400], head_hidden: vec![300], layer_norm_tanh: true }
    }

    /// 500-500-500.
    pub fn single_task(obs_dim: usize, action_dim: usize) -> Self {
        Self { torso: vec![500, 500], head_hidden: vec![500], ..Self::multitask(obs_dim, action_dim, 1) }
    }

    fn input_dim(&self) -> usize {
        self.obs_dim + self.action_dim
    }

    fn feature_dim(&self) -> usize {
        self.torso.last().copied().unwrap_or(self.input_dim())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetraceConfig {
    pub length: usize,
    pub gamma: f64,
    /// Policy samples per state for the expected next-state value.
    pub samples: usize,
}

impl Default for RetraceConfig {
    fn default() -> Self {
        Self { length: 10, gamma: 0.99, samples: 20 }
    }
}

/// Live parameters plus a target copy that only changes on [`QEnsemble::update_target`].
#[derive(Clone, Debug)]
pub struct QEnsemble {
    config: CriticConfig,
    pub params: ParamStore,
    target: ParamStore,
    copies: u64,
}

fn layers(prefix: &str, input: usize, widths: &[usize]) -> Vec<Linear> {
    let mut prev = input;
    widths
        .iter()
        .enumerate()
        .map(|(k, &w)| {
            let l = Linear::new(format!("{prefix}/{k}"), prev, w);
            prev = w;
            l
        })
        .collect()
}

impl QEnsemble {
    pub fn new<R: Rng + ?Sized>(config: CriticConfig, rng: &mut R) -> Result<Self, CriticError> {
        let mut params = ParamStore::new();
        for (k, l) in layers("torso", config.input_dim(), &config.torso).iter().enumerate() {
            l.init(&mut params, rng)?;
            if k == 0 {
                params.get_or_init("torso/ln/gamma", &[l.outputs], Init::Constant(1.0), rng)?;
                params.get_or_init("torso/ln/beta", &[l.outputs], Init::Constant(0.0), rng)?;
            }
        }
        let mut q = Self { config, params, target: ParamStore::new(), copies: 0 };
        for i in 0..q.config.num_tasks {
            q.init_head(i, rng)?;
        }
        q.target = q.params.snapshot();
        Ok(q)
    }

    fn init_head<R: Rng + ?Sized>(&mut self, task: usize, rng: &mut R) -> Result<(), CriticError> {
        let hidden = layers(&format!("q/{task}/h"), self.config.feature_dim(), &self.config.head_hidden);
        for l in &hidden {
            l.init(&mut self.params, rng)?;
        }
        let h = hidden.last().map(|l| l.outputs).unwrap_or(self.config.feature_dim());
        Linear::new(format!("q/{task}/out"), h, 1).init(&mut self.params, rng)?;
        Ok(())
    }

    /// Rebuilds an ensemble from stored parts, e.g. a checkpoint.
    pub fn from_parts(config: CriticConfig, params: ParamStore, target: ParamStore, copies: u64) -> Self {
        Self { config, params, target, copies }
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn num_tasks(&self) -> usize {
        self.config.num_tasks
    }

    pub fn target(&self) -> &ParamStore {
        &self.target
    }

    /// Number of target copies so far.
    pub fn copies(&self) -> u64 {
        self.copies
    }

    /// `φ′ ← φ`, bitwise.
    pub fn update_target(&mut self) {
        self.target = self.params.snapshot();
        self.copies += 1;
    }

    /// Adds a head for a new task (live and target).
    pub fn add_task<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<usize, CriticError> {
        let task = self.config.num_tasks;
        self.init_head(task, rng)?;
        self.config.num_tasks += 1;
        self.target = self.params.snapshot();
        Ok(task)
    }

    fn store(&self, use_target: bool) -> &ParamStore {
        if use_target {
            &self.target
        } else {
            &self.params
        }
    }

    fn torso(&self, tape: &mut Tape, store: &ParamStore, obs: Var, actions: Var) -> Result<Var, CriticError> {
        let squashed = tape.tanh(actions);
        let mut h = tape.concat_cols(&[obs, squashed])?;
        for (k, l) in layers("torso", self.config.input_dim(), &self.config.torso).iter().enumerate() {
            h = l.forward(tape, store, h)?;
            if k == 0 {
                let g = tape.param(store, "torso/ln/gamma")?;
                let b = tape.param(store, "torso/ln/beta")?;
                h = tape.layer_norm(h, g, b)?;
                if self.config.layer_norm_tanh {
                    h = tape.tanh(h);
                }
            } else {
                h = tape.elu(h);
            }
        }
        Ok(h)
    }

    fn head(&self, tape: &mut Tape, store: &ParamStore, features: Var, task: usize) -> Result<Var, CriticError> {
        let mut h = features;
        for l in layers(&format!("q/{task}/h"), self.config.feature_dim(), &self.config.head_hidden) {
            h = l.forward(tape, store, h)?;
            h = tape.elu(h);
        }
        Ok(linear(tape, store, h, &format!("q/{task}/out"))?)
    }

    fn check(&self, tape: &Tape, obs: Var, actions: Var) -> Result<(), CriticError> {
        let (o, a) = (tape.value(obs), tape.value(actions));
        if o.cols() != self.config.obs_dim || a.cols() != self.config.action_dim || o.rows() != a.rows() {
            return Err(DiffError::shape("critic", "observation/action widths or row counts").into());
        }
        Ok(())
    }

    /// Every head, `[B, I]`.
    pub fn q_all(&self, tape: &mut Tape, obs: Var, actions: Var, use_target: bool) -> Result<Var, CriticError> {
        self.check(tape, obs, actions)?;
        let store = self.store(use_target);
        let f = self.torso(tape, store, obs, actions)?;
        let heads = (0..self.config.num_tasks)
            .map(|i| self.head(tape, store, f, i))
            .collect::<Result<Vec<_>, _>>()?;
        if heads.len() == 1 {
            return Ok(heads[0]);
        }
        Ok(tape.concat_cols(&heads)?)
    }

    /// Head `tasks[r]` for row `r`, `[B, 1]`. Each head runs only on its rows.
    pub fn q_tasks(
        &self,
        tape: &mut Tape,
        obs: Var,
        actions: Var,
        tasks: &[usize],
        use_target: bool,
    ) -> Result<Var, CriticError> {
        self.check(tape, obs, actions)?;
        if tasks.len() != tape.value(obs).rows() {
            return Err(DiffError::shape("q_tasks", "one task per row").into());
        }
        if let Some(&task) = tasks.iter().find(|&&t| t >= self.config.num_tasks) {
            return Err(CriticError::TaskOutOfRange { task, tasks: self.config.num_tasks });
        }
        let store = self.store(use_target);
        let f = self.torso(tape, store, obs, actions)?;
        let mut present: Vec<usize> = tasks.to_vec();
        present.sort_unstable();
        present.dedup();
        if present.len() == 1 {
            return self.head(tape, store, f, present[0]);
        }
        let mut blocks = Vec::with_capacity(present.len());
        let mut order = Vec::with_capacity(tasks.len());
        for &t in &present {
            let idx: Vec<usize> = (0..tasks.len()).filter(|&r| tasks[r] == t).collect();
            let rows = tape.gather_rows(f, &idx)?;
            blocks.push(self.head(tape, store, rows, t)?);
            order.extend(idx);
        }
        let stacked = tape.concat_rows(&blocks)?;
        let mut inverse = vec![0; order.len()];
        for (pos, &r) in order.iter().enumerate() {
            inverse[r] = pos;
        }
        Ok(tape.gather_rows(stacked, &inverse)?)
    }

    pub fn q_value(&self, obs: &[f64], action: &[f64], task: usize, use_target: bool) -> Result<f64, CriticError> {
        let mut tape = Tape::no_grad();
        let o = tape.constant(Tensor::matrix(1, obs.len(), obs.to_vec()));
        let a = tape.constant(Tensor::matrix(1, action.len(), action.to_vec()));
        let q = self.q_tasks(&mut tape, o, a, &[task], use_target)?;
        Ok(tape.value(q).item())
    }
}

/// Trace coefficients `c_k = min(1, π(a_k|s_k)/b(a_k|s_k))`; the first is 1.
pub fn trace_coefficients(log_pi: &[f64], log_b: &[f64]) -> Vec<f64> {
    log_pi
        .iter()
        .zip(log_b)
        .enumerate()
        .map(|(k, (lp, lb))| if k == 0 { 1.0 } else { (lp - lb).exp().min(1.0) })
        .collect()
}

/// Retrace returns over one snippet, backwards:
/// `Q_t = r_t + γ (V_{t+1} + c_{t+1} (Q_{t+1} − Q′(s_{t+1}, a_{t+1})))`,
/// ending with `r + γ V` at the last step.
///
/// `q_taken[t]` is the target Q at `(s_t, a_t)`, `v_next[t]` the expected
/// target value at `s_{t+1}` (0 if terminal) and `c[t]` the trace
/// coefficient of step `t`.
pub fn retrace(rewards: &[f64], q_taken: &[f64], v_next: &[f64], c: &[f64], gamma: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut out = vec![0.0; n];
    for t in (0..n).rev() {
        let mut next = v_next[t];
        if t + 1 < n {
            next += c[t + 1] * (out[t + 1] - q_taken[t + 1]);
        }
        out[t] = rewards[t] + gamma * next;
    }
    out
}

/// Flattened view of a batch of snippets.
pub struct SnippetRows {
    pub obs: Tensor,
    pub actions: Tensor,
    /// `(start, len)` of each snippet in the flattened rows.
    pub spans: Vec<(usize, usize)>,
}

impl SnippetRows {
    pub fn new(snippets: &[&Snippet]) -> Result<Self, CriticError> {
        let first = snippets.iter().find_map(|s| s.steps.first()).ok_or(CriticError::EmptyBatch)?;
        let (od, ad) = (first.state.len(), first.action.len());
        let (mut obs, mut actions, mut spans) = (Vec::new(), Vec::new(), Vec::new());
        let mut start = 0;
        for s in snippets {
            for step in &s.steps {
                obs.extend_from_slice(&step.state);
                actions.extend_from_slice(&step.action);
            }
            spans.push((start, s.steps.len()));
            start += s.steps.len();
        }
        Ok(Self { obs: Tensor::matrix(start, od, obs), actions: Tensor::matrix(start, ad, actions), spans })
    }

    pub fn rows(&self) -> usize {
        self.obs.rows()
    }
}

/// Monte-Carlo `E_{a∼π(·|s,i)} Q′(s, a, i)` for every state row and task,
/// `[S, I]`. Samples are clipped to the action bounds before scoring.
pub fn expected_values<R: Rng + ?Sized>(
    critic: &QEnsemble,
    policy: &Policy,
    states: &Tensor,
    samples: usize,
    rng: &mut R,
) -> Result<Tensor, CriticError> {
    let (s, tasks) = (states.rows(), critic.num_tasks());
    let mut tape = Tape::no_grad();
    let x = tape.constant(states.clone());
    let mix = policy.forward_each_task(&mut tape, x)?;
    let obs = tape.repeat_rows(x, tasks);
    let row_tasks: Vec<usize> = (0..s).flat_map(|_| 0..tasks).collect();
    let mut actions = mix.sample_rows(&tape, samples, rng);
    let (low, high) = (policy.config().action_low, policy.config().action_high);
    for v in actions.data_mut() {
        *v = v.clamp(low, high);
    }
    let obs_n = tape.repeat_rows(obs, samples);
    let act = tape.constant(actions);
    let sample_tasks: Vec<usize> = row_tasks.iter().flat_map(|&i| std::iter::repeat(i).take(samples)).collect();
    let q = critic.q_tasks(&mut tape, obs_n, act, &sample_tasks, true)?;
    let qv = tape.value(q).data();
    let inv = 1.0 / samples as f64;
    let means = qv.chunks(samples).map(|c| c.iter().sum::<f64>() * inv).collect();
    Ok(Tensor::matrix(s, tasks, means))
}

/// `log π(a_t | s_t, i)` for every row and task, `[N, I]`.
pub fn policy_log_probs(policy: &Policy, obs: &Tensor, actions: &Tensor) -> Result<Tensor, CriticError> {
    let (n, tasks) = (obs.rows(), policy.num_tasks());
    let mut tape = Tape::no_grad();
    let o = tape.constant(obs.clone());
    let a = tape.constant(actions.clone());
    let a = tape.repeat_rows(a, tasks);
    let mix = policy.forward_each_task(&mut tape, o)?;
    let lp = mixture_log_prob(&mut tape, &mix, a)?;
    Ok(Tensor::matrix(n, tasks, tape.value(lp).data().to_vec()))
}

/// Retrace targets for every step and every task, `[N, I]`, using the
/// target critic and the target policy `policy`.
pub fn retrace_targets<R: Rng + ?Sized>(
    critic: &QEnsemble,
    policy: &Policy,
    snippets: &[&Snippet],
    batch: &SnippetRows,
    cfg: &RetraceConfig,
    rng: &mut R,
) -> Result<Tensor, CriticError> {
    let tasks = critic.num_tasks();
    for s in snippets {
        if let Some(step) = s.steps.iter().position(|st| !st.behavior_log_prob.is_finite()) {
            return Err(CriticError::MissingBehavior { step });
        }
    }
    let mut tape = Tape::no_grad();
    let o = tape.constant(batch.obs.clone());
    let a = tape.constant(batch.actions.clone());
    let qv = critic.q_all(&mut tape, o, a, true)?;
    let q_taken = tape.value(qv).clone();

    // States whose value is needed: every non-first step plus bootstraps.
    let od = batch.obs.cols();
    let mut vstates = Vec::new();
    let mut next_index: Vec<Option<usize>> = Vec::with_capacity(batch.rows());
    let mut count = 0;
    for (s, &(start, len)) in snippets.iter().zip(&batch.spans) {
        for t in 0..len {
            if t + 1 < len {
                vstates.extend_from_slice(batch.obs.row(start + t + 1));
                next_index.push(Some(count));
                count += 1;
            } else if let Some(b) = &s.bootstrap {
                vstates.extend_from_slice(b);
                next_index.push(Some(count));
                count += 1;
            } else {
                next_index.push(None);
            }
        }
    }
    let values = if count > 0 {
        expected_values(critic, policy, &Tensor::matrix(count, od, vstates), cfg.samples, rng)?
    } else {
        Tensor::zeros(&[0, tasks])
    };
    let log_pi = policy_log_probs(policy, &batch.obs, &batch.actions)?;

    let mut out = vec![0.0; batch.rows() * tasks];
    for (s, &(start, len)) in snippets.iter().zip(&batch.spans) {
        let log_b: Vec<f64> = s.steps.iter().map(|st| st.behavior_log_prob).collect();
        for i in 0..tasks {
            let rewards: Vec<f64> = s.steps.iter().map(|st| st.rewards[i]).collect();
            let qt: Vec<f64> = (start..start + len).map(|r| q_taken.row(r)[i]).collect();
            let vn: Vec<f64> =
                (start..start + len).map(|r| next_index[r].map_or(0.0, |k| values.row(k)[i])).collect();
            let lp: Vec<f64> = (start..start + len).map(|r| log_pi.row(r)[i]).collect();
            let c = trace_coefficients(&lp, &log_b);
            for (t, v) in retrace(&rewards, &qt, &vn, &c, cfg.gamma).into_iter().enumerate() {
                out[(start + t) * tasks + i] = v;
            }
        }
    }
    Ok(Tensor::matrix(batch.rows(), tasks, out))
}

/// Mean over rows of the squared error summed over task heads. `targets`
/// enter as constants.
pub fn critic_loss(
    tape: &mut Tape,
    critic: &QEnsemble,
    obs: Var,
    actions: Var,
    targets: &Tensor,
) -> Result<Var, CriticError> {
    let q = critic.q_all(tape, obs, actions, false)?;
    let t = tape.constant(targets.clone());
    let diff = tape.sub(q, t)?;
    let sq = tape.square(diff);
    let per_row = tape.sum_cols(sq)?;
    Ok(tape.mean(per_row))
}
