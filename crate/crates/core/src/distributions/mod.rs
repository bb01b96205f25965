//! Diagonal Gaussians, categoricals, Gaussian mixtures and the decoupled
//! trust-region distance between two mixtures.
//!
//! Value-level types live here; batched, differentiable versions used by the
//! learner are in [`batched`].

pub mod batched;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// `½ ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Probability floor for categorical KL on probability vectors and for the
/// Bhattacharyya distance.
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("component count mismatch: {0} vs {1}")]
    Components(usize, usize),
    #[error("scale must be positive and finite, got {0}")]
    Scale(f64),
    #[error("a mixture needs at least one component")]
    Empty,
}

fn same_len(a: usize, b: usize) -> Result<(), DistError> {
    if a == b {
        Ok(())
    } else {
        Err(DistError::Dim(a, b))
    }
}

/// `N(mean, diag(A)²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub cholesky_diag: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, cholesky_diag: Vec<f64>) -> Result<Self, DistError> {
        same_len(mean.len(), cholesky_diag.len())?;
        if let Some(&bad) = cholesky_diag.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(DistError::Scale(bad));
        }
        Ok(Self { mean, cholesky_diag })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], cholesky_diag: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prob(&self, a: &[f64]) -> Result<f64, DistError> {
        same_len(self.dim(), a.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.cholesky_diag)
            .zip(a)
            .map(|((m, s), x)| {
                let z = (x - m) / s;
                -0.5 * z * z - s.ln() - HALF_LN_2PI
            })
            .sum())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.cholesky_diag)
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s * z
            })
            .collect()
    }
}

/// Categorical over `M` outcomes parameterized by logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Categorical {
    pub logits: Vec<f64>,
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Categorical {
    pub fn new(logits: Vec<f64>) -> Result<Self, DistError> {
        if logits.is_empty() {
            return Err(DistError::Empty);
        }
        Ok(Self { logits })
    }

    pub fn from_probs(probs: &[f64]) -> Result<Self, DistError> {
        Self::new(probs.iter().map(|p| p.ln()).collect())
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let lse = logsumexp(&self.logits);
        self.logits.iter().map(|l| l - lse).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().into_iter().map(f64::exp).collect()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (j, l) in self.logits.iter().enumerate() {
            if *l > self.logits[best] {
                best = j;
            }
        }
        best
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let probs = self.probs();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (j, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // Rounding left a sliver above the cumulative sum; take the last
        // outcome with positive mass.
        probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
    }
}

/// Mixture `Σ_j α_j N(μ_j, A_j²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureGaussian {
    pub weights: Categorical,
    pub components: Vec<DiagGaussian>,
}

impl MixtureGaussian {
    pub fn new(weights: Categorical, components: Vec<DiagGaussian>) -> Result<Self, DistError> {
        if components.is_empty() {
            return Err(DistError::Empty);
        }
        if weights.len() != components.len() {
            return Err(DistError::Components(weights.len(), components.len()));
        }
        let d = components[0].dim();
        for c in &components {
            same_len(d, c.dim())?;
        }
        Ok(Self { weights, components })
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn log_prob(&self, a: &[f64]) -> Result<f64, DistError> {
        let lw = self.weights.log_probs();
        let terms = self
            .components
            .iter()
            .zip(&lw)
            .map(|(c, w)| Ok(w + c.log_prob(a)?))
            .collect::<Result<Vec<_>, DistError>>()?;
        Ok(logsumexp(&terms))
    }

    /// Ancestral sample: component index, then action from that component.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let j = self.weights.sample(rng);
        (self.components[j].sample(rng), j)
    }

    pub fn mean(&self) -> Vec<f64> {
        let p = self.weights.probs();
        let mut out = vec![0.0; self.dim()];
        for (c, w) in self.components.iter().zip(p) {
            out.iter_mut().zip(&c.mean).for_each(|(o, m)| *o += w * m);
        }
        out
    }

    /// Mean of the component with the largest weight.
    pub fn mode_component_mean(&self) -> &[f64] {
        &self.components[self.weights.argmax()].mean
    }
}

/// `KL(p ‖ q)` between diagonal Gaussians.
pub fn kl_gaussian(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64, DistError> {
    same_len(p.dim(), q.dim())?;
    Ok((0..p.dim())
        .map(|d| {
            let (sp, sq) = (p.cholesky_diag[d], q.cholesky_diag[d]);
            let dm = p.mean[d] - q.mean[d];
            (sq / sp).ln() + (sp * sp + dm * dm) / (2.0 * sq * sq) - 0.5
        })
        .sum())
}

/// `KL(p ‖ q)` between categoricals, exact from logits.
pub fn kl_categorical(p: &Categorical, q: &Categorical) -> Result<f64, DistError> {
    same_len(p.len(), q.len())?;
    let (lp, lq) = (p.log_probs(), q.log_probs());
    let mut kl = 0.0;
    for (a, b) in lp.iter().zip(&lq) {
        let pa = a.exp();
        if pa == 0.0 {
            continue;
        }
        if *b == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        kl += pa * (a - b);
    }
    Ok(kl.max(0.0))
}

/// `KL(p ‖ q)` between probability vectors with both floored at
/// [`PROB_FLOOR`].
pub fn kl_probabilities(p: &[f64], q: &[f64]) -> Result<f64, DistError> {
    same_len(p.len(), q.len())?;
    Ok(p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| {
            let (a, b) = (a.max(PROB_FLOOR), b.max(PROB_FLOOR));
            a * (a / b).ln()
        })
        .sum::<f64>()
        .max(0.0))
}

/// The decoupled distance between an old and a new mixture.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Distance {
    /// KL between the categoricals.
    pub t_h: f64,
    /// Mean-only part: `1/M Σ_j KL(N(μ_j, Σ_j) ‖ N(μ'_j, Σ_j))`.
    pub t_l_mean: f64,
    /// Covariance-only part: `1/M Σ_j KL(N(μ_j, Σ_j) ‖ N(μ_j, Σ'_j))`.
    pub t_l_cov: f64,
}

impl Distance {
    pub fn total(&self) -> f64 {
        self.t_h + self.t_l_mean + self.t_l_cov
    }
}

/// Components are matched by index.
pub fn distance_t(old: &MixtureGaussian, new: &MixtureGaussian) -> Result<Distance, DistError> {
    if old.num_components() != new.num_components() {
        return Err(DistError::Components(old.num_components(), new.num_components()));
    }
    same_len(old.dim(), new.dim())?;
    let m = old.num_components() as f64;
    let mut t_l_mean = 0.0;
    let mut t_l_cov = 0.0;
    for (o, n) in old.components.iter().zip(&new.components) {
        let mean_only = DiagGaussian { mean: n.mean.clone(), cholesky_diag: o.cholesky_diag.clone() };
        let cov_only = DiagGaussian { mean: o.mean.clone(), cholesky_diag: n.cholesky_diag.clone() };
        t_l_mean += kl_gaussian(o, &mean_only)?;
        t_l_cov += kl_gaussian(o, &cov_only)?;
    }
    Ok(Distance { t_h: kl_categorical(&old.weights, &new.weights)?, t_l_mean: t_l_mean / m, t_l_cov: t_l_cov / m })
}

/// `-ln Σ_j √(p_j q_j)` on probability vectors, with the coefficient clamped
/// to `[M·PROB_FLOOR, 1]`.
pub fn bhattacharyya_probs(p: &[f64], q: &[f64]) -> Result<f64, DistError> {
    same_len(p.len(), q.len())?;
    let bc: f64 = p.iter().zip(q).map(|(a, b)| (a.max(0.0) * b.max(0.0)).sqrt()).sum();
    let floor = p.len() as f64 * PROB_FLOOR;
    Ok(-(bc.clamp(floor, 1.0)).ln())
}

pub fn bhattacharyya(p: &Categorical, q: &Categorical) -> Result<f64, DistError> {
    bhattacharyya_probs(&p.probs(), &q.probs())
}
