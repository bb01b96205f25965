//! Differentiable batched mixture densities and divergences on a [`Tape`].
//!
//! A batch of `B` mixtures with `M` components over `A` action dimensions is
//! held as three tape variables: means and Cholesky diagonals laid out
//! `[B, M*A]` (component-major within a row) and logits `[B, M]`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffmath::{DiffError, Tape, Tensor, Var};

use super::{Categorical, DiagGaussian, MixtureGaussian, HALF_LN_2PI};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixtureVars {
    pub means: Var,
    pub stds: Var,
    pub logits: Var,
    pub components: usize,
    pub action_dim: usize,
}

impl MixtureVars {
    pub fn rows(&self, tape: &Tape) -> usize {
        tape.value(self.logits).rows()
    }

    /// Value-level mixture for batch row `r`.
    pub fn row(&self, tape: &Tape, r: usize) -> MixtureGaussian {
        let (m, a) = (self.components, self.action_dim);
        let means = tape.value(self.means).row(r);
        let stds = tape.value(self.stds).row(r);
        let components = (0..m)
            .map(|j| DiagGaussian {
                mean: means[j * a..(j + 1) * a].to_vec(),
                cholesky_diag: stds[j * a..(j + 1) * a].to_vec(),
            })
            .collect();
        MixtureGaussian { weights: Categorical { logits: tape.value(self.logits).row(r).to_vec() }, components }
    }

    /// Same mixture with every tensor detached.
    pub fn detach(&self, tape: &mut Tape) -> MixtureVars {
        MixtureVars {
            means: tape.detach(self.means),
            stds: tape.detach(self.stds),
            logits: tape.detach(self.logits),
            ..*self
        }
    }

    /// `n` ancestral samples per row as `[B*n, A]`, row `r`'s samples first.
    pub fn sample_rows<R: Rng + ?Sized>(&self, tape: &Tape, n: usize, rng: &mut R) -> Tensor {
        let (m, a) = (self.components, self.action_dim);
        let means = tape.value(self.means);
        let stds = tape.value(self.stds);
        let logits = tape.value(self.logits);
        let rows = logits.rows();
        let mut out = Vec::with_capacity(rows * n * a);
        for r in 0..rows {
            let weights = Categorical { logits: logits.row(r).to_vec() };
            let (mu, sd) = (means.row(r), stds.row(r));
            for _ in 0..n {
                let j = if m == 1 { 0 } else { weights.sample(rng) };
                for d in 0..a {
                    let z: f64 = StandardNormal.sample(rng);
                    out.push(mu[j * a + d] + sd[j * a + d] * z);
                }
            }
        }
        Tensor::matrix(rows * n, a, out)
    }

    /// Rows repeated `times` times each (one block per state).
    pub fn repeat_rows(&self, tape: &mut Tape, times: usize) -> MixtureVars {
        MixtureVars {
            means: tape.repeat_rows(self.means, times),
            stds: tape.repeat_rows(self.stds, times),
            logits: tape.repeat_rows(self.logits, times),
            ..*self
        }
    }
}

/// Per-component log densities `[B, M]` of `actions` (`[B, A]`).
pub fn component_log_probs(
    tape: &mut Tape,
    means: Var,
    stds: Var,
    actions: Var,
    components: usize,
    action_dim: usize,
) -> Result<Var, DiffError> {
    if tape.value(actions).cols() != action_dim || tape.value(means).cols() != components * action_dim {
        return Err(DiffError::shape("component_log_probs", "action or mean width"));
    }
    let tiled = tape.tile_cols(actions, components);
    let diff = tape.sub(tiled, means)?;
    let z = tape.div(diff, stds)?;
    let z2 = tape.square(z);
    let quad = tape.scale(z2, -0.5);
    let log_std = tape.log(stds);
    let terms = tape.sub(quad, log_std)?;
    let per_component = tape.group_sum(terms, action_dim)?;
    Ok(tape.add_scalar(per_component, -(action_dim as f64) * HALF_LN_2PI))
}

/// `log Σ_j α_j N(a; μ_j, A_j²)` per row, `[B, 1]`.
pub fn mixture_log_prob(tape: &mut Tape, mix: &MixtureVars, actions: Var) -> Result<Var, DiffError> {
    let comp = component_log_probs(tape, mix.means, mix.stds, actions, mix.components, mix.action_dim)?;
    let log_w = tape.log_softmax(mix.logits);
    let joint = tape.add(log_w, comp)?;
    Ok(tape.logsumexp(joint))
}

/// `KL(p ‖ q)` per row from logits, `[B, 1]`.
pub fn kl_categorical(tape: &mut Tape, p_logits: Var, q_logits: Var) -> Result<Var, DiffError> {
    let lp = tape.log_softmax(p_logits);
    let lq = tape.log_softmax(q_logits);
    let p = tape.softmax(p_logits);
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    tape.sum_cols(terms)
}

/// Per-component `KL(N(μ_p, A_p²) ‖ N(μ_q, A_q²))`, `[B, M]`.
pub fn kl_gaussian(
    tape: &mut Tape,
    p_means: Var,
    p_stds: Var,
    q_means: Var,
    q_stds: Var,
    action_dim: usize,
) -> Result<Var, DiffError> {
    let ratio = tape.div(q_stds, p_stds)?;
    let log_ratio = tape.log(ratio);
    let dm = tape.sub(p_means, q_means)?;
    let dm2 = tape.square(dm);
    let sp2 = tape.square(p_stds);
    let num = tape.add(sp2, dm2)?;
    let sq2 = tape.square(q_stds);
    let two_sq2 = tape.scale(sq2, 2.0);
    let frac = tape.div(num, two_sq2)?;
    let t = tape.add(log_ratio, frac)?;
    let t = tape.add_scalar(t, -0.5);
    tape.group_sum(t, action_dim)
}

/// Batched decoupled distance, each part `[B, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct DistanceVars {
    pub t_h: Var,
    pub t_l_mean: Var,
    pub t_l_cov: Var,
}

pub fn distance_t(tape: &mut Tape, old: &MixtureVars, new: &MixtureVars) -> Result<DistanceVars, DiffError> {
    if old.components != new.components || old.action_dim != new.action_dim {
        return Err(DiffError::shape("distance_t", "mixture layouts differ"));
    }
    let inv_m = 1.0 / old.components as f64;
    let t_h = kl_categorical(tape, old.logits, new.logits)?;
    let mean_kl = kl_gaussian(tape, old.means, old.stds, new.means, old.stds, old.action_dim)?;
    let mean_sum = tape.sum_cols(mean_kl)?;
    let t_l_mean = tape.scale(mean_sum, inv_m);
    let cov_kl = kl_gaussian(tape, old.means, old.stds, old.means, new.stds, old.action_dim)?;
    let cov_sum = tape.sum_cols(cov_kl)?;
    let t_l_cov = tape.scale(cov_sum, inv_m);
    Ok(DistanceVars { t_h, t_l_mean, t_l_cov })
}

/// Places a batch of value-level mixtures on the tape as constants.
pub fn constant_mixtures(tape: &mut Tape, mixtures: &[MixtureGaussian]) -> Result<MixtureVars, DiffError> {
    let first = mixtures.first().ok_or_else(|| DiffError::shape("constant_mixtures", "empty batch"))?;
    let (m, a) = (first.num_components(), first.dim());
    let mut means = Vec::with_capacity(mixtures.len() * m * a);
    let mut stds = Vec::with_capacity(mixtures.len() * m * a);
    let mut logits = Vec::with_capacity(mixtures.len() * m);
    for mix in mixtures {
        if mix.num_components() != m || mix.dim() != a {
            return Err(DiffError::shape("constant_mixtures", "ragged batch"));
        }
        for c in &mix.components {
            means.extend_from_slice(&c.mean);
            stds.extend_from_slice(&c.cholesky_diag);
        }
        logits.extend_from_slice(&mix.weights.logits);
    }
    let b = mixtures.len();
    Ok(MixtureVars {
        means: tape.constant(Tensor::matrix(b, m * a, means)),
        stds: tape.constant(Tensor::matrix(b, m * a, stds)),
        logits: tape.constant(Tensor::matrix(b, m, logits)),
        components: m,
        action_dim: a,
    })
}
