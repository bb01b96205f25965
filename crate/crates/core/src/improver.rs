//! Policy improvement: the E-step reweighting with its temperature dual, the
//! trust-region M-step with decoupled multipliers, the reparameterized (SVG)
//! alternative, and the learner that ties one update of every part together.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::critic::{critic_loss, retrace_targets, CriticError, QEnsemble, RetraceConfig, SnippetRows};
use crate::diffmath::{AdamConfig, DiffError, Gradients, ParamStore, Tape, Tensor, Var};
use crate::distributions::batched::{self, MixtureVars};
use crate::policy::{Policy, PolicyError};
use crate::replay::{ReplayBuffer, ReplayError, Snippet};

#[derive(Debug, thiserror::Error)]
pub enum ImproverError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("non-finite {what} at learner step {step}")]
    NonFinite { what: &'static str, step: u64 },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

/// Which likelihood the M-step maximizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MStepForm {
    /// `log π^μ + log π^Σ + log π^α`: each intermediate policy swaps one
    /// parameter group into the snapshot.
    #[default]
    Decoupled,
    /// `log Σ_o π^L π^H` of the current policy.
    Marginal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNormalization {
    #[default]
    PerState,
    /// One normalizer over the whole batch, scaled so weights average one
    /// per state.
    Global,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyOptimizer {
    #[default]
    Mpo,
    Svg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImproverConfig {
    pub optimizer: PolicyOptimizer,
    pub mstep: MStepForm,
    pub normalization: WeightNormalization,
    /// E-step KL bound.
    pub epsilon: f64,
    pub eps_mean: f64,
    pub eps_cov: f64,
    pub eps_cat: f64,
    /// Actions sampled per state (`N_s`).
    pub samples: usize,
    pub dual_lr: f64,
    pub eta_init: f64,
    pub lambda_init: f64,
    pub dual_floor: f64,
    pub svg_kl_weight: f64,
    pub gumbel_temperature: f64,
    pub straight_through: bool,
}

impl Default for ImproverConfig {
    fn default() -> Self {
        Self {
            optimizer: PolicyOptimizer::Mpo,
            mstep: MStepForm::Decoupled,
            normalization: WeightNormalization::PerState,
            epsilon: 0.1,
            eps_mean: 5e-4,
            eps_cov: 1e-5,
            eps_cat: 1e-4,
            samples: 20,
            dual_lr: 1e-2,
            eta_init: 1.0,
            lambda_init: 1.0,
            dual_floor: 1e-6,
            svg_kl_weight: 0.05,
            gumbel_temperature: 0.5,
            straight_through: false,
        }
    }
}

/// Temperature and multipliers, stored as logs so they stay positive.
#[derive(Clone, Debug)]
pub struct DualState {
    pub params: ParamStore,
    floor: f64,
}

pub const LOG_ETA: &str = "log_eta";
pub const LOG_LAMBDA_MEAN: &str = "log_lambda_mean";
pub const LOG_LAMBDA_COV: &str = "log_lambda_cov";
pub const LOG_LAMBDA_CAT: &str = "log_lambda_cat";

impl DualState {
    pub fn new(eta: f64, lambda: f64, floor: f64) -> Self {
        let mut params = ParamStore::with_adam(AdamConfig::default());
        for (name, v) in [(LOG_ETA, eta), (LOG_LAMBDA_MEAN, lambda), (LOG_LAMBDA_COV, lambda), (LOG_LAMBDA_CAT, lambda)] {
            params.insert(name, Tensor::scalar(v.max(floor).ln())).expect("fresh store");
        }
        Self { params, floor }
    }

    pub fn from_config(cfg: &ImproverConfig) -> Self {
        Self::new(cfg.eta_init, cfg.lambda_init, cfg.dual_floor)
    }

    /// Rebuilds the duals from a stored parameter set.
    pub fn from_params(params: ParamStore, floor: f64) -> Self {
        Self { params, floor }
    }

    fn get(&self, name: &str) -> f64 {
        self.params.get(name).expect("dual parameter").item().exp().max(self.floor)
    }

    pub fn eta(&self) -> f64 {
        self.get(LOG_ETA)
    }

    pub fn lambda_mean(&self) -> f64 {
        self.get(LOG_LAMBDA_MEAN)
    }

    pub fn lambda_cov(&self) -> f64 {
        self.get(LOG_LAMBDA_COV)
    }

    pub fn lambda_cat(&self) -> f64 {
        self.get(LOG_LAMBDA_CAT)
    }

    /// Adam step on the log-parameters, then the floor is applied.
    pub fn apply(&mut self, grads: &Gradients, lr: f64) -> Result<(), DiffError> {
        self.params.adam_step(grads, lr)?;
        let min = self.floor.ln();
        let names: Vec<String> = self.params.names().cloned().collect();
        for n in names {
            let v = self.params.get_mut(&n)?;
            let x = v.data()[0];
            if x < min {
                v.data_mut()[0] = min;
            }
        }
        Ok(())
    }
}

/// Per-state `exp(Q/η)` weights over the sampled actions, `[S, N]`.
pub fn estep_weights(q: &Tensor, eta: f64, normalization: WeightNormalization) -> Tensor {
    let (s, n) = (q.rows(), q.cols());
    let mut out = vec![0.0; s * n];
    match normalization {
        WeightNormalization::PerState => {
            for r in 0..s {
                let row = q.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (j, v) in row.iter().enumerate() {
                    let w = ((v - max) / eta).exp();
                    out[r * n + j] = w;
                    total += w;
                }
                out[r * n..(r + 1) * n].iter_mut().for_each(|w| *w /= total);
            }
        }
        WeightNormalization::Global => {
            let max = q.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, v) in out.iter_mut().zip(q.data()) {
                *o = ((v - max) / eta).exp();
                total += *o;
            }
            let scale = s as f64 / total;
            out.iter_mut().for_each(|w| *w *= scale);
        }
    }
    Tensor::matrix(s, n, out)
}

/// Mean over states of the entropy of the normalized per-state weights.
pub fn weight_entropy(weights: &Tensor) -> f64 {
    let s = weights.rows();
    let mut total = 0.0;
    for r in 0..s {
        let row = weights.row(r);
        let z: f64 = row.iter().sum();
        total -= row.iter().filter(|w| **w > 0.0).map(|w| (w / z) * (w / z).ln()).sum::<f64>();
    }
    total / s as f64
}

fn row_max(q: &Tensor) -> Vec<f64> {
    (0..q.rows()).map(|r| q.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
}

/// `g(η) = ηε + η · mean_s log((1/N) Σ_j exp(Q_sj/η))`, evaluated with a
/// per-state max shift.
pub fn dual_value(q: &Tensor, eta: f64, epsilon: f64) -> f64 {
    let n = q.cols() as f64;
    let maxes = row_max(q);
    let mut acc = 0.0;
    for (r, m) in maxes.iter().enumerate() {
        let lse = q.row(r).iter().map(|v| ((v - m) / eta).exp()).sum::<f64>().ln();
        acc += m + eta * (lse - n.ln());
    }
    eta * epsilon + acc / q.rows() as f64
}

/// Differentiable `g(η)`; `eta` holds a single value.
pub fn dual_loss(tape: &mut Tape, eta: Var, q: &Tensor, epsilon: f64) -> Result<Var, DiffError> {
    let (s, n) = (q.rows(), q.cols());
    let maxes = row_max(q);
    let mut shifted = q.clone();
    for r in 0..s {
        for j in 0..n {
            shifted.data_mut()[r * n + j] -= maxes[r];
        }
    }
    let mean_max = maxes.iter().sum::<f64>() / s as f64;
    let x = tape.constant(shifted);
    let scaled = tape.div_scalar_var(x, eta)?;
    let lse = tape.logsumexp(scaled);
    let avg = tape.mean(lse);
    let inner = tape.add_scalar(avg, -(n as f64).ln());
    let term = tape.mul(inner, eta)?;
    let eps_term = tape.scale(eta, epsilon);
    let total = tape.add(term, eps_term)?;
    Ok(tape.add_scalar(total, mean_max))
}

/// Batch-averaged trust-region distances `(T_H, T_mean, T_cov)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasuredDistance {
    pub t_h: f64,
    pub t_mean: f64,
    pub t_cov: f64,
}

/// Which `(T, ε)` pairs the multiplier step sees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub eps_mean: f64,
    pub eps_cov: f64,
    pub eps_cat: f64,
}

impl From<&ImproverConfig> for Bounds {
    fn from(c: &ImproverConfig) -> Self {
        Self { eps_mean: c.eps_mean, eps_cov: c.eps_cov, eps_cat: c.eps_cat }
    }
}

/// Gradient of `Σ_k λ_k (ε_k − T_k)` with respect to each `log λ_k`:
/// descending it raises `λ_k` when `T_k > ε_k` and lowers it otherwise.
pub fn multiplier_gradients(duals: &DualState, t: &MeasuredDistance, b: &Bounds) -> Gradients {
    let mut g = Gradients::new();
    g.insert(LOG_LAMBDA_MEAN, Tensor::scalar(duals.lambda_mean() * (b.eps_mean - t.t_mean)));
    g.insert(LOG_LAMBDA_COV, Tensor::scalar(duals.lambda_cov() * (b.eps_cov - t.t_cov)));
    g.insert(LOG_LAMBDA_CAT, Tensor::scalar(duals.lambda_cat() * (b.eps_cat - t.t_h)));
    g
}

/// One multiplier update from measured distances.
pub fn multiplier_step(duals: &mut DualState, t: &MeasuredDistance, b: &Bounds, lr: f64) -> Result<(), DiffError> {
    let g = multiplier_gradients(duals, t, b);
    duals.apply(&g, lr)
}

/// Copies a mixture computed on another tape onto `dst` as constants.
pub fn mixture_constants(src: &Tape, mix: &MixtureVars, dst: &mut Tape) -> MixtureVars {
    MixtureVars {
        means: dst.constant(src.value(mix.means).clone()),
        stds: dst.constant(src.value(mix.stds).clone()),
        logits: dst.constant(src.value(mix.logits).clone()),
        ..*mix
    }
}

/// Snapshot-policy mixtures for `(obs, tasks)` as constants on `tape`.
pub fn snapshot_mixture(tape: &mut Tape, snapshot: &Policy, obs: &Tensor, tasks: &[usize]) -> Result<MixtureVars, ImproverError> {
    let mut t = Tape::no_grad();
    let o = t.constant(obs.clone());
    let mix = snapshot.forward(&mut t, o, tasks)?;
    Ok(mixture_constants(&t, &mix, tape))
}

pub struct MStepTerms {
    pub loss: Var,
    /// Weighted log-likelihood (averaged over states) before penalties.
    pub likelihood: f64,
    pub distance: MeasuredDistance,
    pub live: MixtureVars,
}

/// Weighted maximum-likelihood loss with Lagrangian trust-region penalties.
///
/// `actions` holds `N` samples per state (`[S*N, A]`, state-major) and
/// `weights` the matching E-step weights (`[S, N]`). `old` is the snapshot
/// mixture as constants.
#[allow(clippy::too_many_arguments)]
pub fn mstep_loss(
    tape: &mut Tape,
    policy: &Policy,
    old: &MixtureVars,
    obs: Var,
    tasks: &[usize],
    actions: &Tensor,
    weights: &Tensor,
    duals: &DualState,
    cfg: &ImproverConfig,
) -> Result<MStepTerms, ImproverError> {
    let s = tasks.len();
    let n = weights.cols();
    let live = policy.forward(tape, obs, tasks)?;
    let a = tape.constant(actions.clone());
    let log_lik = match cfg.mstep {
        MStepForm::Decoupled => {
            let pi_mean = MixtureVars { means: live.means, ..*old };
            let pi_cov = MixtureVars { stds: live.stds, ..*old };
            let pi_cat = MixtureVars { logits: live.logits, ..*old };
            let mut total: Option<Var> = None;
            for mix in [pi_mean, pi_cov, pi_cat] {
                let rep = mix.repeat_rows(tape, n);
                let lp = batched::mixture_log_prob(tape, &rep, a)?;
                total = Some(match total {
                    None => lp,
                    Some(t) => tape.add(t, lp)?,
                });
            }
            total.expect("three terms")
        }
        MStepForm::Marginal => {
            let rep = live.repeat_rows(tape, n);
            batched::mixture_log_prob(tape, &rep, a)?
        }
    };
    let w = tape.constant(Tensor::matrix(s * n, 1, weights.data().to_vec()));
    let weighted = tape.mul(log_lik, w)?;
    let sum = tape.sum(weighted);
    let likelihood = tape.scale(sum, 1.0 / s as f64);

    let d = batched::distance_t(tape, old, &live)?;
    let t_h = tape.mean(d.t_h);
    let t_mean = tape.mean(d.t_l_mean);
    let t_cov = tape.mean(d.t_l_cov);
    let distance = MeasuredDistance {
        t_h: tape.value(t_h).item(),
        t_mean: tape.value(t_mean).item(),
        t_cov: tape.value(t_cov).item(),
    };
    let mut loss = tape.neg(likelihood);
    for (t, lambda, eps) in [
        (t_mean, duals.lambda_mean(), cfg.eps_mean),
        (t_cov, duals.lambda_cov(), cfg.eps_cov),
        (t_h, duals.lambda_cat(), cfg.eps_cat),
    ] {
        let slack = tape.add_scalar(t, -eps);
        let pen = tape.scale(slack, lambda);
        loss = tape.add(loss, pen)?;
    }
    let likelihood = tape.value(likelihood).item();
    Ok(MStepTerms { loss, likelihood, distance, live })
}

/// One Gumbel-softmax relaxed sample.
pub fn gumbel_softmax_sample<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<Vec<f64>, ImproverError> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(ImproverError::Temperature(temperature));
    }
    let z: Vec<f64> = logits.iter().map(|l| (l + gumbel(rng)) / temperature).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Frozen noise for the reparameterized estimator: `K` draws per state.
#[derive(Clone, Debug)]
pub struct SvgNoise {
    pub per_state: usize,
    /// Standard normal, `[S*K, M*A]`.
    pub zeta: Tensor,
    /// Gumbel, `[S*K, M]`.
    pub gumbel: Tensor,
}

impl SvgNoise {
    pub fn sample<R: Rng + ?Sized>(states: usize, per_state: usize, components: usize, action_dim: usize, rng: &mut R) -> Self {
        let rows = states * per_state;
        let zeta = (0..rows * components * action_dim).map(|_| StandardNormal.sample(rng)).collect();
        let g = (0..rows * components).map(|_| gumbel(rng)).collect();
        Self {
            per_state,
            zeta: Tensor::matrix(rows, components * action_dim, zeta),
            gumbel: Tensor::matrix(rows, components, g),
        }
    }
}

pub struct SvgTerms {
    pub loss: Var,
    pub mean_q: f64,
    pub regularizer: f64,
    pub live: MixtureVars,
}

/// Negative reparameterized value plus the weighted KL to the snapshot.
///
/// Actions are `Σ_j y_j (μ_j + σ_j ζ_j)` with `y` a Gumbel-softmax sample
/// over the components; a single component reduces to `μ + σ ζ`.
#[allow(clippy::too_many_arguments)]
pub fn svg_loss(
    tape: &mut Tape,
    policy: &Policy,
    old: &MixtureVars,
    critic: &QEnsemble,
    obs: Var,
    tasks: &[usize],
    noise: &SvgNoise,
    cfg: &ImproverConfig,
) -> Result<SvgTerms, ImproverError> {
    if cfg.gumbel_temperature <= 0.0 || !cfg.gumbel_temperature.is_finite() {
        return Err(ImproverError::Temperature(cfg.gumbel_temperature));
    }
    let k = noise.per_state;
    let live = policy.forward(tape, obs, tasks)?;
    let (m, a) = (live.components, live.action_dim);
    let rep = live.repeat_rows(tape, k);
    let zeta = tape.constant(noise.zeta.clone());
    let spread = tape.mul(rep.stds, zeta)?;
    let comp_actions = tape.add(rep.means, spread)?;
    let actions = if m == 1 {
        comp_actions
    } else {
        let g = tape.constant(noise.gumbel.clone());
        let z = tape.add(rep.logits, g)?;
        let z = tape.scale(z, 1.0 / cfg.gumbel_temperature);
        let mut y = tape.softmax(z);
        if cfg.straight_through {
            let soft = tape.value(y).clone();
            let mut shift = vec![0.0; soft.len()];
            for r in 0..soft.rows() {
                let row = soft.row(r);
                let best = (0..m).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                for j in 0..m {
                    shift[r * m + j] = f64::from(j == best) - row[j];
                }
            }
            let shift = tape.constant(Tensor::matrix(soft.rows(), m, shift));
            y = tape.add(y, shift)?;
        }
        let yw = tape.repeat_cols(y, a);
        let weighted = tape.mul(yw, comp_actions)?;
        tape.block_sum(weighted, a)?
    };
    let obs_rep = tape.repeat_rows(obs, k);
    let task_rep: Vec<usize> = tasks.iter().flat_map(|&i| std::iter::repeat(i).take(k)).collect();
    let q = critic.q_tasks(tape, obs_rep, actions, &task_rep, false)?;
    let mean_q = tape.mean(q);

    let t_h = batched::kl_categorical(tape, old.logits, live.logits)?;
    let kl = batched::kl_gaussian(tape, old.means, old.stds, live.means, live.stds, a)?;
    let kl_sum = tape.sum_cols(kl)?;
    let t_l = tape.scale(kl_sum, 1.0 / m as f64);
    let t = tape.add(t_h, t_l)?;
    let reg = tape.mean(t);
    let weighted_reg = tape.scale(reg, cfg.svg_kl_weight);
    let neg_q = tape.neg(mean_q);
    let loss = tape.add(neg_q, weighted_reg)?;
    Ok(SvgTerms { loss, mean_q: tape.value(mean_q).item(), regularizer: tape.value(reg).item(), live })
}

/// Mean entropy of the categorical rows of `logits`.
pub fn categorical_entropy(logits: &Tensor) -> f64 {
    let (r, m) = (logits.rows(), logits.cols());
    let mut total = 0.0;
    for i in 0..r {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|l| (l - max).exp()).sum();
        for l in row {
            let lp = l - max - z.ln();
            total -= lp.exp() * lp;
        }
    }
    if m == 0 {
        0.0
    } else {
        total / r as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub improver: ImproverConfig,
    pub retrace: RetraceConfig,
    /// Snippets per batch.
    pub batch_size: usize,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub target_period: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            improver: ImproverConfig::default(),
            retrace: RetraceConfig::default(),
            batch_size: 256,
            policy_lr: 2e-4,
            critic_lr: 2e-4,
            target_period: 500,
        }
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: u64,
    pub critic_loss: f64,
    pub mean_q: f64,
    pub dual: f64,
    pub eta: f64,
    pub lambda_mean: f64,
    pub lambda_cov: f64,
    pub lambda_cat: f64,
    pub t_h: f64,
    pub t_mean: f64,
    pub t_cov: f64,
    pub weight_entropy: f64,
    pub categorical_entropy: f64,
    pub target_updated: bool,
}

/// Policy, critic, their target copies and the dual variables.
#[derive(Clone, Debug)]
pub struct Learner {
    pub config: LearnerConfig,
    pub policy: Policy,
    /// `π_θk`: the snapshot used for sampling, retrace and the trust region.
    pub target_policy: Policy,
    pub critic: QEnsemble,
    pub duals: DualState,
    steps: u64,
    rng: ChaCha8Rng,
}

impl Learner {
    pub fn new(config: LearnerConfig, policy: Policy, critic: QEnsemble, rng: ChaCha8Rng) -> Self {
        let duals = DualState::from_config(&config.improver);
        let target_policy = policy.clone();
        Self { config, target_policy, policy, critic, duals, steps: 0, rng }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Restores step counter and RNG, e.g. after loading a checkpoint.
    pub fn restore_progress(&mut self, steps: u64, rng: ChaCha8Rng) {
        self.steps = steps;
        self.rng = rng;
    }

    /// Target copy for both networks.
    pub fn update_targets(&mut self) {
        self.target_policy = self.policy.clone();
        self.critic.update_target();
    }

    /// Draws a batch with the learner's generator, so a caller can release
    /// a shared replay before running [`Self::step_on`].
    pub fn sample_batch(&mut self, replay: &ReplayBuffer) -> Result<Vec<Arc<Snippet>>, ImproverError> {
        Ok(replay.sample_batch(self.config.batch_size, &mut self.rng)?)
    }

    /// One learner iteration on a freshly sampled batch.
    pub fn step(&mut self, replay: &ReplayBuffer) -> Result<StepDiagnostics, ImproverError> {
        let batch = self.sample_batch(replay)?;
        let refs: Vec<&Snippet> = batch.iter().map(|s| s.as_ref()).collect();
        self.step_on(&refs)
    }

    /// One learner iteration: gradients for the critic, temperature,
    /// multipliers and policy are all computed on the same batch, checked
    /// for finiteness, then applied.
    pub fn step_on(&mut self, snippets: &[&Snippet]) -> Result<StepDiagnostics, ImproverError> {
        let cfg = self.config.improver.clone();
        let rows = SnippetRows::new(snippets)?;
        let step = self.steps;
        let mut diag = StepDiagnostics { step, ..Default::default() };

        // Critic.
        let targets = retrace_targets(&self.critic, &self.target_policy, snippets, &rows, &self.config.retrace, &mut self.rng)?;
        let mut tape = Tape::new();
        let o = tape.constant(rows.obs.clone());
        let a = tape.constant(rows.actions.clone());
        let closs = critic_loss(&mut tape, &self.critic, o, a, &targets)?;
        diag.critic_loss = tape.value(closs).item();
        let critic_grads = tape.backward(closs)?.grads_for(&self.critic.params);
        drop(tape);

        // Policy.
        let s = rows.rows();
        let tasks: Vec<usize> = (0..s).map(|_| self.rng.gen_range(0..self.policy.num_tasks())).collect();
        let mut tape = Tape::new();
        let obs = tape.constant(rows.obs.clone());
        let old = snapshot_mixture(&mut tape, &self.target_policy, &rows.obs, &tasks)?;
        let (policy_grads, dual_grads) = match cfg.optimizer {
            PolicyOptimizer::Mpo => {
                let n = cfg.samples;
                let actions = old.sample_rows(&tape, n, &mut self.rng);
                let mut clipped = actions.clone();
                let (low, high) = (self.policy.config().action_low, self.policy.config().action_high);
                clipped.data_mut().iter_mut().for_each(|v| *v = v.clamp(low, high));
                let q = {
                    let mut qt = Tape::no_grad();
                    let on = qt.constant(rows.obs.clone());
                    let on = qt.repeat_rows(on, n);
                    let ac = qt.constant(clipped);
                    let rep: Vec<usize> = tasks.iter().flat_map(|&i| std::iter::repeat(i).take(n)).collect();
                    let qv = self.critic.q_tasks(&mut qt, on, ac, &rep, true)?;
                    Tensor::matrix(s, n, qt.value(qv).data().to_vec())
                };
                diag.mean_q = q.data().iter().sum::<f64>() / q.len() as f64;
                let eta = self.duals.eta();
                let weights = estep_weights(&q, eta, cfg.normalization);
                diag.weight_entropy = weight_entropy(&weights);

                let mut dt = Tape::new();
                let log_eta = dt.param(&self.duals.params, LOG_ETA)?;
                let eta_var = dt.exp(log_eta);
                let g = dual_loss(&mut dt, eta_var, &q, cfg.epsilon)?;
                diag.dual = dt.value(g).item();
                let mut dual_grads = dt.backward(g)?.grads_for(&self.duals.params);

                // The likelihood is fit to the samples as drawn; their values
                // were scored at the clipped (executed) point.
                let terms = mstep_loss(&mut tape, &self.policy, &old, obs, &tasks, &actions, &weights, &self.duals, &cfg)?;
                diag.t_h = terms.distance.t_h;
                diag.t_mean = terms.distance.t_mean;
                diag.t_cov = terms.distance.t_cov;
                diag.categorical_entropy = categorical_entropy(tape.value(terms.live.logits));
                let mult = multiplier_gradients(&self.duals, &terms.distance, &Bounds::from(&cfg));
                for (k, v) in mult.iter() {
                    dual_grads.insert(k.clone(), v.clone());
                }
                let pg = tape.backward(terms.loss)?.grads_for(&self.policy.params);
                (pg, Some(dual_grads))
            }
            PolicyOptimizer::Svg => {
                let noise = SvgNoise::sample(s, cfg.samples, old.components, old.action_dim, &mut self.rng);
                let terms = svg_loss(&mut tape, &self.policy, &old, &self.critic, obs, &tasks, &noise, &cfg)?;
                diag.mean_q = terms.mean_q;
                let d = batched::distance_t(&mut tape, &old, &terms.live)?;
                diag.t_h = tape.value(d.t_h).data().iter().sum::<f64>() / s as f64;
                diag.t_mean = tape.value(d.t_l_mean).data().iter().sum::<f64>() / s as f64;
                diag.t_cov = tape.value(d.t_l_cov).data().iter().sum::<f64>() / s as f64;
                diag.categorical_entropy = categorical_entropy(tape.value(terms.live.logits));
                (tape.backward(terms.loss)?.grads_for(&self.policy.params), None)
            }
        };

        for (what, g) in [("critic gradient", &critic_grads), ("policy gradient", &policy_grads)] {
            if !g.global_norm().is_finite() {
                return Err(ImproverError::NonFinite { what, step });
            }
        }
        if let Some(g) = &dual_grads {
            if !g.global_norm().is_finite() {
                return Err(ImproverError::NonFinite { what: "dual gradient", step });
            }
        }
        self.policy.params.adam_step(&policy_grads, self.config.policy_lr)?;
        if let Some(g) = dual_grads {
            self.duals.apply(&g, cfg.dual_lr)?;
        }
        self.critic.params.adam_step(&critic_grads, self.config.critic_lr)?;
        diag.eta = self.duals.eta();
        diag.lambda_mean = self.duals.lambda_mean();
        diag.lambda_cov = self.duals.lambda_cov();
        diag.lambda_cat = self.duals.lambda_cat();

        self.steps += 1;
        if self.steps % self.config.target_period.max(1) == 0 {
            self.update_targets();
            diag.target_updated = true;
        }
        Ok(diag)
    }
}
