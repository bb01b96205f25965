use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DiffError, Tensor};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Adam hyperparameters other than the learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let n = value.len();
        Self { value, trainable: true, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub(crate) fn restore(value: Tensor, trainable: bool, m: Vec<f64>, v: Vec<f64>) -> Self {
        Self { value, trainable, m, v }
    }
}

/// Initializer used when a parameter is first registered.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    FanInUniform { fan_in: usize },
    Constant(f64),
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().flat_map(|t| t.data()).map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Adds `other` into `self`, creating entries as needed.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<(), DiffError> {
        for (name, g) in other.iter() {
            match self.grads.get_mut(name) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(DiffError::shape("accumulate", name.clone()));
                    }
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }
}

/// Named parameter tensors plus Adam state.
///
/// Each store carries an identity used by [`super::Tape`] to cache parameter
/// leaves; clones receive a fresh identity so a snapshot never aliases the
/// live parameters on a shared tape.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    params: BTreeMap<String, Param>,
    step: u64,
    adam: AdamConfig,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self { id: fresh_id(), params: self.params.clone(), step: self.step, adam: self.adam }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { id: fresh_id(), params: BTreeMap::new(), step: 0, adam: AdamConfig::default() }
    }

    pub fn with_adam(adam: AdamConfig) -> Self {
        Self { adam, ..Self::new() }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn adam_config(&self) -> AdamConfig {
        self.adam
    }

    /// Registers a tensor; fails if the name is taken.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), DiffError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    /// Returns the named parameter, creating it with `init` when absent.
    pub fn get_or_init<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<&Tensor, DiffError> {
        if let Some(p) = self.params.get(name) {
            if p.value.shape() != shape {
                return Err(DiffError::shape(
                    "get_or_init",
                    format!("`{name}` has shape {:?}, requested {shape:?}", p.value.shape()),
                ));
            }
        } else {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::FanInUniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
                Init::Constant(c) => vec![c; n],
            };
            self.params.insert(name.to_string(), Param::new(Tensor::new(shape.to_vec(), data)?));
        }
        Ok(&self.params[name].value)
    }

    /// Swaps in a new value, possibly of a different shape, with fresh
    /// optimizer moments. The trainable flag is kept.
    pub fn replace(&mut self, name: &str, value: Tensor) -> Result<(), DiffError> {
        let p = self.params.get_mut(name).ok_or_else(|| DiffError::UnknownParam(name.into()))?;
        let trainable = p.trainable;
        *p = Param::new(value);
        p.trainable = trainable;
        Ok(())
    }

    pub(crate) fn insert_param(&mut self, name: String, param: Param) {
        self.params.insert(name, param);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, DiffError> {
        self.params.get(name).map(|p| &p.value).ok_or_else(|| DiffError::UnknownParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, DiffError> {
        self.params.get_mut(name).map(|p| &mut p.value).ok_or_else(|| DiffError::UnknownParam(name.into()))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).map(|p| p.trainable).unwrap_or(false)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<(), DiffError> {
        let p = self.params.get_mut(name).ok_or_else(|| DiffError::UnknownParam(name.into()))?;
        p.trainable = trainable;
        Ok(())
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Copy keeping only the parameters `rename` maps to a name, stored
    /// under that name with their flags and optimizer state.
    pub fn renamed(&self, rename: impl Fn(&str) -> Option<String>) -> ParamStore {
        let params = self.params.iter().filter_map(|(k, p)| rename(k).map(|n| (n, p.clone()))).collect();
        ParamStore { id: fresh_id(), params, step: self.step, adam: self.adam }
    }

    /// Value-only copy: same tensors and flags, zeroed optimizer state.
    pub fn snapshot(&self) -> ParamStore {
        let params = self
            .params
            .iter()
            .map(|(k, p)| {
                let mut q = Param::new(p.value.clone());
                q.trainable = p.trainable;
                (k.clone(), q)
            })
            .collect();
        ParamStore { id: fresh_id(), params, step: self.step, adam: self.adam }
    }

    /// Overwrites every value with the matching value from `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<(), DiffError> {
        for (name, p) in self.params.iter_mut() {
            let src = other.get(name)?;
            if src.shape() != p.value.shape() {
                return Err(DiffError::shape("copy_values_from", name.clone()));
            }
            p.value.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Bitwise equality of all values.
    pub fn values_equal(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().all(|(k, p)| {
                other.params.get(k).is_some_and(|q| {
                    q.value.shape() == p.value.shape()
                        && q.value.data().iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits())
                })
            })
    }

    /// One Adam update with bias correction.
    ///
    /// Trainable parameters missing from `grads` are treated as having a zero
    /// gradient (their moments still decay). A non-finite gradient rejects the
    /// whole step and leaves the store untouched.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64) -> Result<(), DiffError> {
        for (name, g) in grads.iter() {
            let p = self.params.get(name).ok_or_else(|| DiffError::UnknownParam(name.clone()))?;
            if g.shape() != p.value.shape() {
                return Err(DiffError::shape("adam_step", format!("gradient shape for `{name}`")));
            }
            if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(DiffError::NonFiniteGradient { param: name.clone(), index: bad, value: g.data()[bad] });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.adam;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let g = grads.get(name).map(|g| g.data());
            let values = p.value.data_mut();
            for k in 0..values.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                p.m[k] = beta1 * p.m[k] + (1.0 - beta1) * gk;
                p.v[k] = beta2 * p.v[k] + (1.0 - beta2) * gk * gk;
                let mhat = p.m[k] / c1;
                let vhat = p.v[k] / c2;
                values[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
