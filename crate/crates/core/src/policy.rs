//! Network-backed policies.
//!
//! The hierarchical policy is a mixture `π(a|s,i) = Σ_o π^L(a|s,o) π^H(o|s,i)`:
//! a task-agnostic torso feeds `M` Gaussian component heads, which never see
//! the task, and one categorical head per task. The flat baselines (one-hot
//! task input, or one Gaussian head per task) are exposed as single-component
//! mixtures so every learner path handles them uniformly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{linear, DiffError, Init, Linear, ParamStore, Tape, Tensor, Var};
use crate::distributions::batched::MixtureVars;
use crate::distributions::{DistError, MixtureGaussian};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("task {task} out of range for {tasks} tasks")]
    TaskOutOfRange { task: usize, tasks: usize },
    #[error("observation has {got} values, policy expects {expected}")]
    ObsDim { got: usize, expected: usize },
    #[error("cannot grow to {requested} components (limit {limit})")]
    ComponentLimit { requested: usize, limit: usize },
    #[error("operation needs a hierarchical policy")]
    NotHierarchical,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Hierarchical,
    /// Single Gaussian, task one-hot appended to the observation.
    Monolithic,
    /// Shared torso, one Gaussian head per task.
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Every component mean starts at zero.
    Homogeneous,
    /// Component `j` starts with every mean coordinate at the `j`-th point of
    /// an even grid over the action range.
    DistinctMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub num_tasks: usize,
    pub components: usize,
    pub max_components: usize,
    pub torso: Vec<usize>,
    pub head_hidden: Vec<usize>,
    /// tanh after the first-layer layer norm.
    pub layer_norm_tanh: bool,
    pub init: InitScheme,
    /// Added to the softplus output so scales never reach zero.
    pub min_std: f64,
    pub action_low: f64,
    pub action_high: f64,
}

impl PolicyConfig {
    /// Multitask defaults: torso 400-200, heads 100.
    pub fn multitask(obs_dim: usize, action_dim: usize, num_tasks: usize) -> Self {
        Self {
            kind: PolicyKind::Hierarchical,
            obs_dim,
            action_dim,
            num_tasks,
            components: num_tasks,
            max_components: num_tasks + 1,
            torso: vec![400, 200],
            head_hidden: vec![100],
            layer_norm_tanh: true,
            init: InitScheme::Homogeneous,
            min_std: 1e-4,
            action_low: -1.0,
            action_high: 1.0,
        }
    }

    /// Single-task defaults: 200-200-200 with three components.
    pub fn single_task(obs_dim: usize, action_dim: usize) -> Self {
        Self {
            num_tasks: 1,
            components: 3,
            max_components: 4,
            torso: vec![200, 200],
            head_hidden: vec![200],
            ..Self::multitask(obs_dim, action_dim, 1)
        }
    }

    fn effective_components(&self) -> usize {
        match self.kind {
            PolicyKind::Hierarchical => self.components,
            _ => 1,
        }
    }

    fn torso_input(&self) -> usize {
        match self.kind {
            PolicyKind::Monolithic => self.obs_dim + self.num_tasks,
            _ => self.obs_dim,
        }
    }

    fn feature_dim(&self) -> usize {
        self.torso.last().copied().unwrap_or(self.torso_input())
    }

    /// Initial component means, `[M][A]`.
    pub fn initial_means(&self) -> Vec<Vec<f64>> {
        let m = self.effective_components();
        (0..m)
            .map(|j| {
                let v = match self.init {
                    InitScheme::DistinctMeans if m > 1 => {
                        self.action_low + (self.action_high - self.action_low) * j as f64 / (m - 1) as f64
                    }
                    InitScheme::DistinctMeans => 0.5 * (self.action_low + self.action_high),
                    InitScheme::Homogeneous => 0.0,
                };
                vec![v; self.action_dim]
            })
            .collect()
    }
}

/// Result of one environment action.
#[derive(Clone, Debug, PartialEq)]
pub struct Act {
    pub action: Vec<f64>,
    pub component: usize,
    /// Mixture log-density of the (clipped) executed action for the acting task.
    pub log_prob: f64,
}

/// Architecture plus parameters. Cloning gives an independent snapshot.
#[derive(Clone, Debug)]
pub struct Policy {
    config: PolicyConfig,
    pub params: ParamStore,
}

fn mlp_layers(prefix: &str, input: usize, widths: &[usize]) -> Vec<Linear> {
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

impl Policy {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self, PolicyError> {
        if config.components == 0 || config.components > config.max_components {
            return Err(PolicyError::ComponentLimit { requested: config.components, limit: config.max_components });
        }
        let mut params = ParamStore::new();
        let mut p = Self { config, params: ParamStore::new() };
        p.init_torso(&mut params, rng)?;
        match p.config.kind {
            PolicyKind::Hierarchical => {
                let means = p.config.initial_means();
                for (j, mean) in means.iter().enumerate() {
                    p.init_gaussian_head(&mut params, &format!("comp/{j}"), mean, rng)?;
                }
                for i in 0..p.config.num_tasks {
                    p.init_categorical_head(&mut params, i, p.config.components, rng)?;
                }
            }
            PolicyKind::Monolithic => {
                let mean = vec![0.0; p.config.action_dim];
                p.init_gaussian_head(&mut params, "gauss", &mean, rng)?;
            }
            PolicyKind::Independent => {
                let mean = vec![0.0; p.config.action_dim];
                for i in 0..p.config.num_tasks {
                    p.init_gaussian_head(&mut params, &format!("gauss/{i}"), &mean, rng)?;
                }
            }
        }
        p.params = params;
        Ok(p)
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn num_tasks(&self) -> usize {
        self.config.num_tasks
    }

    pub fn num_components(&self) -> usize {
        self.config.effective_components()
    }

    pub fn action_dim(&self) -> usize {
        self.config.action_dim
    }

    /// Rebuilds a policy from a stored config and parameters.
    pub fn from_parts(config: PolicyConfig, params: ParamStore) -> Self {
        Self { config, params }
    }

    /// Same architecture with different parameter values.
    pub fn with_params(&self, params: ParamStore) -> Self {
        Self { config: self.config.clone(), params }
    }

    fn init_torso<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), PolicyError> {
        for (k, layer) in mlp_layers("torso", self.config.torso_input(), &self.config.torso).iter().enumerate() {
            layer.init(store, rng)?;
            if k == 0 {
                store.get_or_init("torso/ln/gamma", &[layer.outputs], Init::Constant(1.0), rng)?;
                store.get_or_init("torso/ln/beta", &[layer.outputs], Init::Constant(0.0), rng)?;
            }
        }
        Ok(())
    }

    fn init_hidden<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<usize, PolicyError> {
        let layers = mlp_layers(prefix, self.config.feature_dim(), &self.config.head_hidden);
        for l in &layers {
            l.init(store, rng)?;
        }
        Ok(layers.last().map(|l| l.outputs).unwrap_or(self.config.feature_dim()))
    }

    /// Output layers start with zero weights so the initial means equal the
    /// biases at every state.
    fn init_gaussian_head<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        prefix: &str,
        mean: &[f64],
        rng: &mut R,
    ) -> Result<(), PolicyError> {
        let h = self.init_hidden(store, &format!("{prefix}/h"), rng)?;
        let a = self.config.action_dim;
        Linear::new(format!("{prefix}/mean"), h, a).init_zero_weight(store, mean)?;
        Linear::new(format!("{prefix}/std"), h, a).init_zero_weight(store, &vec![0.0; a])?;
        Ok(())
    }

    fn init_categorical_head<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        task: usize,
        components: usize,
        rng: &mut R,
    ) -> Result<(), PolicyError> {
        let h = self.init_hidden(store, &format!("cat/{task}/h"), rng)?;
        Linear::new(format!("cat/{task}/out"), h, components).init_zero_weight(store, &vec![0.0; components])?;
        Ok(())
    }

    fn torso(&self, tape: &mut Tape, x: Var) -> Result<Var, PolicyError> {
        let layers = mlp_layers("torso", self.config.torso_input(), &self.config.torso);
        let mut h = x;
        for (k, l) in layers.iter().enumerate() {
            h = l.forward(tape, &self.params, h)?;
            if k == 0 {
                let g = tape.param(&self.params, "torso/ln/gamma")?;
                let b = tape.param(&self.params, "torso/ln/beta")?;
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

    fn hidden(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var, PolicyError> {
        let mut h = x;
        for l in mlp_layers(prefix, self.config.feature_dim(), &self.config.head_hidden) {
            h = l.forward(tape, &self.params, h)?;
            h = tape.elu(h);
        }
        Ok(h)
    }

    /// `(means, stds)`, each `[B, A]`.
    fn gaussian_head(&self, tape: &mut Tape, prefix: &str, features: Var) -> Result<(Var, Var), PolicyError> {
        let h = self.hidden(tape, &format!("{prefix}/h"), features)?;
        let mean = linear(tape, &self.params, h, &format!("{prefix}/mean"))?;
        let pre = linear(tape, &self.params, h, &format!("{prefix}/std"))?;
        let sp = tape.softplus(pre);
        let std = tape.add_scalar(sp, self.config.min_std);
        Ok((mean, std))
    }

    fn check_inputs(&self, tape: &Tape, obs: Var, tasks: &[usize]) -> Result<(), PolicyError> {
        let got = tape.value(obs).cols();
        if got != self.config.obs_dim {
            return Err(PolicyError::ObsDim { got, expected: self.config.obs_dim });
        }
        if tasks.len() != tape.value(obs).rows() {
            return Err(DiffError::shape("policy forward", "one task per observation row").into());
        }
        if let Some(&task) = tasks.iter().find(|&&t| t >= self.config.num_tasks) {
            return Err(PolicyError::TaskOutOfRange { task, tasks: self.config.num_tasks });
        }
        Ok(())
    }

    /// Runs each task's head only on the rows of that task and restores the
    /// original row order.
    fn per_task<F>(&self, tape: &mut Tape, features: Var, tasks: &[usize], mut head: F) -> Result<Var, PolicyError>
    where
        F: FnMut(&mut Tape, usize, Var) -> Result<Var, PolicyError>,
    {
        let mut present: Vec<usize> = tasks.to_vec();
        present.sort_unstable();
        present.dedup();
        if present.len() == 1 {
            return head(tape, present[0], features);
        }
        let mut blocks = Vec::with_capacity(present.len());
        let mut order = Vec::with_capacity(tasks.len());
        for &t in &present {
            let idx: Vec<usize> = (0..tasks.len()).filter(|&r| tasks[r] == t).collect();
            let rows = tape.gather_rows(features, &idx)?;
            blocks.push(head(tape, t, rows)?);
            order.extend(idx);
        }
        let stacked = tape.concat_rows(&blocks)?;
        let mut inverse = vec![0; order.len()];
        for (pos, &r) in order.iter().enumerate() {
            inverse[r] = pos;
        }
        Ok(tape.gather_rows(stacked, &inverse)?)
    }

    /// Component parameters only (task independent): `(means, stds)` as
    /// `[B, M*A]`.
    pub fn components(&self, tape: &mut Tape, obs: Var) -> Result<(Var, Var), PolicyError> {
        if self.config.kind != PolicyKind::Hierarchical {
            return Err(PolicyError::NotHierarchical);
        }
        let f = self.torso(tape, obs)?;
        self.component_heads(tape, f)
    }

    fn component_heads(&self, tape: &mut Tape, features: Var) -> Result<(Var, Var), PolicyError> {
        let (mut means, mut stds) = (Vec::new(), Vec::new());
        for j in 0..self.config.components {
            let (m, s) = self.gaussian_head(tape, &format!("comp/{j}"), features)?;
            means.push(m);
            stds.push(s);
        }
        if means.len() == 1 {
            return Ok((means[0], stds[0]));
        }
        Ok((tape.concat_cols(&means)?, tape.concat_cols(&stds)?))
    }

    /// Mixture for each observation row under the matching task.
    pub fn forward(&self, tape: &mut Tape, obs: Var, tasks: &[usize]) -> Result<MixtureVars, PolicyError> {
        self.check_inputs(tape, obs, tasks)?;
        let rows = tasks.len();
        let a = self.config.action_dim;
        match self.config.kind {
            PolicyKind::Hierarchical => {
                let f = self.torso(tape, obs)?;
                let (means, stds) = self.component_heads(tape, f)?;
                let m = self.config.components;
                let logits = self.per_task(tape, f, tasks, |tape, i, f| {
                    let h = self.hidden(tape, &format!("cat/{i}/h"), f)?;
                    Ok(linear(tape, &self.params, h, &format!("cat/{i}/out"))?)
                })?;
                Ok(MixtureVars { means, stds, logits, components: m, action_dim: a })
            }
            PolicyKind::Monolithic => {
                let mut onehot = vec![0.0; rows * self.config.num_tasks];
                for (r, &t) in tasks.iter().enumerate() {
                    onehot[r * self.config.num_tasks + t] = 1.0;
                }
                let oh = tape.constant(Tensor::matrix(rows, self.config.num_tasks, onehot));
                let x = tape.concat_cols(&[obs, oh])?;
                let f = self.torso(tape, x)?;
                let (means, stds) = self.gaussian_head(tape, "gauss", f)?;
                let logits = tape.constant(Tensor::zeros(&[rows, 1]));
                Ok(MixtureVars { means, stds, logits, components: 1, action_dim: a })
            }
            PolicyKind::Independent => {
                let f = self.torso(tape, obs)?;
                let both = self.per_task(tape, f, tasks, |tape, i, f| {
                    let (m, s) = self.gaussian_head(tape, &format!("gauss/{i}"), f)?;
                    Ok(tape.concat_cols(&[m, s])?)
                })?;
                let means = tape.slice_cols(both, 0, a)?;
                let stds = tape.slice_cols(both, a, a)?;
                let logits = tape.constant(Tensor::zeros(&[rows, 1]));
                Ok(MixtureVars { means, stds, logits, components: 1, action_dim: a })
            }
        }
    }

    /// Mixture of every task at every row, ordered `row * num_tasks + task`.
    /// Equal to [`Self::forward`] on rows repeated once per task, but the
    /// task-independent parts of hierarchical policies run once per row.
    pub fn forward_each_task(&self, tape: &mut Tape, obs: Var) -> Result<MixtureVars, PolicyError> {
        let (rows, tasks) = (tape.value(obs).rows(), self.config.num_tasks);
        if self.config.kind != PolicyKind::Hierarchical {
            let rep = tape.repeat_rows(obs, tasks);
            let per_row: Vec<usize> = (0..rows).flat_map(|_| 0..tasks).collect();
            return self.forward(tape, rep, &per_row);
        }
        self.check_inputs(tape, obs, &vec![0; rows])?;
        let f = self.torso(tape, obs)?;
        let (means, stds) = self.component_heads(tape, f)?;
        let mut blocks = Vec::with_capacity(tasks);
        for i in 0..tasks {
            let h = self.hidden(tape, &format!("cat/{i}/h"), f)?;
            blocks.push(linear(tape, &self.params, h, &format!("cat/{i}/out"))?);
        }
        let stacked = tape.concat_rows(&blocks)?;
        let order: Vec<usize> = (0..rows).flat_map(|r| (0..tasks).map(move |i| i * rows + r)).collect();
        Ok(MixtureVars {
            means: tape.repeat_rows(means, tasks),
            stds: tape.repeat_rows(stds, tasks),
            logits: tape.gather_rows(stacked, &order)?,
            components: self.config.components,
            action_dim: self.config.action_dim,
        })
    }

    /// Value-level mixture for one state.
    pub fn distribution(&self, obs: &[f64], task: usize) -> Result<MixtureGaussian, PolicyError> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(Tensor::matrix(1, obs.len(), obs.to_vec()));
        let mix = self.forward(&mut tape, x, &[task])?;
        Ok(mix.row(&tape, 0))
    }

    pub fn clip(&self, action: &mut [f64]) {
        for v in action.iter_mut() {
            *v = v.clamp(self.config.action_low, self.config.action_high);
        }
    }

    /// Stochastic: ancestral sample clipped to the action bounds.
    /// Deterministic: mean of the highest-weight component.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], task: usize, rng: &mut R, stochastic: bool) -> Result<Act, PolicyError> {
        let mix = self.distribution(obs, task)?;
        let (mut action, component) = if stochastic {
            mix.sample(rng)
        } else {
            let j = mix.weights.argmax();
            (mix.components[j].mean.clone(), j)
        };
        self.clip(&mut action);
        let log_prob = mix.log_prob(&action)?;
        Ok(Act { action, component, log_prob })
    }

    /// Policy over a subset of tasks: task `k` of the result is task
    /// `tasks[k]` of `self` (indices distinct). Shared parameters keep their
    /// values and flags.
    pub fn select_tasks(&self, tasks: &[usize]) -> Result<Policy, PolicyError> {
        let prefix = match self.config.kind {
            PolicyKind::Hierarchical => "cat",
            PolicyKind::Independent => "gauss",
            PolicyKind::Monolithic => return Err(PolicyError::NotHierarchical),
        };
        if let Some(&task) = tasks.iter().find(|&&t| t >= self.config.num_tasks) {
            return Err(PolicyError::TaskOutOfRange { task, tasks: self.config.num_tasks });
        }
        let params = self.params.renamed(|name| {
            let Some(rest) = name.strip_prefix(prefix).and_then(|r| r.strip_prefix('/')) else {
                return Some(name.to_string());
            };
            let (index, tail) = rest.split_once('/')?;
            let old: usize = index.parse().ok()?;
            let new = tasks.iter().position(|&t| t == old)?;
            Some(format!("{prefix}/{new}/{tail}"))
        });
        let config = PolicyConfig { num_tasks: tasks.len(), ..self.config.clone() };
        Ok(Policy { config, params })
    }

    /// Sequential-Only-HL transfer: freezes everything and appends a fresh
    /// categorical head for a new task over the existing components.
    pub fn add_task_frozen_components<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<usize, PolicyError> {
        if self.config.kind != PolicyKind::Hierarchical {
            return Err(PolicyError::NotHierarchical);
        }
        self.params.set_trainable_prefix("", false);
        let task = self.config.num_tasks;
        let mut store = std::mem::take(&mut self.params);
        self.init_categorical_head(&mut store, task, self.config.components, rng)?;
        self.params = store;
        self.config.num_tasks += 1;
        Ok(task)
    }

    /// Sequential transfer: like [`Self::add_task_frozen_components`] and
    /// additionally appends one trainable component. Existing task heads get
    /// a near-zero weight (logit bias −30) on the new component.
    pub fn add_task_and_component<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<usize, PolicyError> {
        if self.config.kind != PolicyKind::Hierarchical {
            return Err(PolicyError::NotHierarchical);
        }
        let m = self.config.components;
        if m + 1 > self.config.max_components {
            return Err(PolicyError::ComponentLimit { requested: m + 1, limit: self.config.max_components });
        }
        self.params.set_trainable_prefix("", false);
        let mut store = std::mem::take(&mut self.params);
        for i in 0..self.config.num_tasks {
            let wname = format!("cat/{i}/out/w");
            let bname = format!("cat/{i}/out/b");
            let w = store.get(&wname)?.clone();
            let b = store.get(&bname)?.clone();
            let h = w.shape()[0];
            let mut wd = Vec::with_capacity(h * (m + 1));
            for r in 0..h {
                wd.extend_from_slice(w.row(r));
                wd.push(0.0);
            }
            let mut bd = b.data().to_vec();
            bd.push(-30.0);
            store.replace(&wname, Tensor::matrix(h, m + 1, wd))?;
            store.replace(&bname, Tensor::vector(bd))?;
        }
        let mean = vec![0.5 * (self.config.action_low + self.config.action_high); self.config.action_dim];
        self.init_gaussian_head(&mut store, &format!("comp/{m}"), &mean, rng)?;
        self.config.components = m + 1;
        let task = self.config.num_tasks;
        self.init_categorical_head(&mut store, task, m + 1, rng)?;
        self.params = store;
        self.config.num_tasks += 1;
        Ok(task)
    }
}
