//! Eager Wengert tape.
//!
//! Every op computes its value immediately and records how to propagate an
//! upstream gradient to its inputs. All ops view tensors as `[rows, cols]`
//! matrices (see [`Tensor`]).

use std::collections::HashMap;

use super::{DiffError, Gradients, ParamStore, Tensor};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_VAR_FLOOR: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { x: usize, w: usize },
    AddRow { x: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    MulScalarVar { x: usize, s: usize },
    DivScalarVar { x: usize, s: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    Square { x: usize },
    Exp { x: usize },
    Log { x: usize },
    Tanh { x: usize },
    Elu { x: usize },
    Softplus { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, floored: Vec<bool> },
    SumAll { x: usize },
    MeanAll { x: usize },
    GroupSum { x: usize, group: usize },
    BlockSum { x: usize, group: usize },
    TileCols { x: usize, times: usize },
    RepeatCols { x: usize, times: usize },
    LogSumExp { x: usize },
    LogSoftmax { x: usize },
    Softmax { x: usize },
    RepeatRows { x: usize, times: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    SliceCols { x: usize, start: usize },
    SelectBlocks { x: usize, blocks: Vec<usize>, group: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient tape. Single writer; values are computed eagerly.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    param_cache: HashMap<(u64, String), Var>,
    param_nodes: Vec<(u64, String, usize)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mat(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn shape2(rows: usize, cols: usize) -> Vec<usize> {
    vec![rows, cols]
}

/// C[m,n] (+)= A[m,k] B[k,n] with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the given dimensions
    // and strides; the callers pass exact row-major extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn row_logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, param_cache: HashMap::new(), param_nodes: Vec::new() }
    }

    /// A tape on which nothing requires gradients (inference only).
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Smallest distance of any elu input on the tape from the kink at zero
    /// (`+inf` when there is none). Finite-difference checks use it to avoid
    /// straddling the non-smooth point.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Elu { x } => Some(self.nodes[x].value.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (used for input sensitivities).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Frozen parameters and no-grad tapes
    /// yield constants. Repeated calls return the cached node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, DiffError> {
        let key = (store.id(), name.to_string());
        if let Some(&v) = self.param_cache.get(&key) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Leaf, store.is_trainable(name));
        self.param_cache.insert(key, v);
        self.param_nodes.push((store.id(), name.to_string(), v.0));
        Ok(v)
    }

    /// Stop-gradient copy.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.val(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var, DiffError> {
        let (r, k) = mat(self.val(x));
        let ws = self.val(w).shape();
        if ws.len() != 2 || ws[0] != k {
            return Err(DiffError::shape("matmul", format!("x [{r}, {k}] vs w {ws:?}")));
        }
        let n = ws[1];
        let mut out = vec![0.0; r * n];
        gemm(r, k, n, self.val(x).data(), k as isize, 1, self.val(w).data(), n as isize, 1, 0.0, &mut out);
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(Tensor::matrix(r, n, out), Op::MatMul { x: x.0, w: w.0 }, ng))
    }

    /// `x + b` with `b` (n values) broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, DiffError> {
        let (r, n) = mat(self.val(x));
        if self.val(b).len() != n {
            return Err(DiffError::shape("add_row", format!("x cols {n}, bias {:?}", self.val(b).shape())));
        }
        let bias = self.val(b).data();
        let mut out = self.val(x).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bias).for_each(|(o, bb)| *o += bb);
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(Tensor::matrix(r, n, out), Op::AddRow { x: x.0, b: b.0 }, ng))
    }

    /// Affine map `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), DiffError> {
        let (ra, ca) = mat(self.val(a));
        let (rb, cb) = mat(self.val(b));
        if ra != rb || ca != cb {
            return Err(DiffError::shape(op, format!("[{ra}, {ca}] vs [{rb}, {cb}]")));
        }
        Ok((ra, ca))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (r, c) = self.same_shape(name, a, b)?;
        let out: Vec<f64> = self.val(a).data().iter().zip(self.val(b).data()).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = if self.val(a).shape().len() == 1 { vec![c] } else { shape2(r, c) };
        Ok(self.push(Tensor::new(shape, out)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a: a.0, b: b.0 })
    }

    /// `x * s` where `s` holds a single value.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var, DiffError> {
        if self.val(s).len() != 1 {
            return Err(DiffError::shape("mul_scalar_var", format!("{:?}", self.val(s).shape())));
        }
        let sv = self.val(s).item();
        let mut t = self.val(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= sv);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(t, Op::MulScalarVar { x: x.0, s: s.0 }, ng))
    }

    /// `x / s` where `s` holds a single value.
    pub fn div_scalar_var(&mut self, x: Var, s: Var) -> Result<Var, DiffError> {
        if self.val(s).len() != 1 {
            return Err(DiffError::shape("div_scalar_var", format!("{:?}", self.val(s).shape())));
        }
        let sv = self.val(s).item();
        let mut t = self.val(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v /= sv);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(t, Op::DivScalarVar { x: x.0, s: s.0 }, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut t = self.val(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale { x: x.0, c })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar { x: x.0 })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square { x: x.0 })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp { x: x.0 })
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log { x: x.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh { x: x.0 })
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, elu, Op::Elu { x: x.0 })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus { x: x.0 })
    }

    /// Per-row normalization over the last axis with learned scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, DiffError> {
        let (r, c) = mat(self.val(x));
        if self.val(gamma).len() != c || self.val(beta).len() != c {
            return Err(DiffError::shape("layer_norm", format!("features {c} vs scale/offset")));
        }
        let xs = self.val(x).data();
        let g = self.val(gamma).data();
        let b = self.val(beta).data();
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut floored = vec![false; r];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            floored[i] = var < LAYER_NORM_VAR_FLOOR;
            let inv = 1.0 / var.max(LAYER_NORM_VAR_FLOOR).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let shape = self.val(x).shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, floored },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll { x: x.0 }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::MeanAll { x: x.0 }, ng)
    }

    /// Sums consecutive groups of `group` columns: `[r, k*group] -> [r, k]`.
    pub fn group_sum(&mut self, x: Var, group: usize) -> Result<Var, DiffError> {
        let (r, c) = mat(self.val(x));
        if group == 0 || c % group != 0 {
            return Err(DiffError::shape("group_sum", format!("{c} cols, group {group}")));
        }
        let k = c / group;
        let xs = self.val(x).data();
        let mut out = vec![0.0; r * k];
        for i in 0..r {
            for j in 0..k {
                out[i * k + j] = xs[i * c + j * group..i * c + (j + 1) * group].iter().sum();
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(r, k, out), Op::GroupSum { x: x.0, group }, ng))
    }

    /// Row sums: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var, DiffError> {
        let c = self.val(x).cols();
        self.group_sum(x, c)
    }

    /// Sums the `k` blocks of width `group`: `[r, k*group] -> [r, group]`.
    pub fn block_sum(&mut self, x: Var, group: usize) -> Result<Var, DiffError> {
        let (r, c) = mat(self.val(x));
        if group == 0 || c % group != 0 {
            return Err(DiffError::shape("block_sum", format!("{c} cols, group {group}")));
        }
        let xs = self.val(x).data();
        let mut out = vec![0.0; r * group];
        for i in 0..r {
            for (j, v) in xs[i * c..(i + 1) * c].iter().enumerate() {
                out[i * group + j % group] += v;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(r, group, out), Op::BlockSum { x: x.0, group }, ng))
    }

    /// Repeats the whole row `times` times: `[r, c] -> [r, times*c]`.
    pub fn tile_cols(&mut self, x: Var, times: usize) -> Var {
        let (r, c) = mat(self.val(x));
        let xs = self.val(x).data();
        let mut out = Vec::with_capacity(r * c * times);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(&xs[i * c..(i + 1) * c]);
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::matrix(r, c * times, out), Op::TileCols { x: x.0, times }, ng)
    }

    /// Repeats each column `times` times in place: `[r, c] -> [r, c*times]`.
    pub fn repeat_cols(&mut self, x: Var, times: usize) -> Var {
        let (r, c) = mat(self.val(x));
        let xs = self.val(x).data();
        let mut out = Vec::with_capacity(r * c * times);
        for v in xs {
            for _ in 0..times {
                out.push(*v);
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::matrix(r, c * times, out), Op::RepeatCols { x: x.0, times }, ng)
    }

    /// Row-wise `log Σ exp`: `[r, c] -> [r, 1]`. Rows that are entirely `-inf`
    /// give `-inf` and pass no gradient.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let (r, c) = mat(self.val(x));
        let xs = self.val(x).data();
        let out: Vec<f64> = (0..r).map(|i| row_logsumexp(&xs[i * c..(i + 1) * c])).collect();
        let ng = self.ng(x);
        self.push(Tensor::matrix(r, 1, out), Op::LogSumExp { x: x.0 }, ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (r, c) = mat(self.val(x));
        let xs = self.val(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let lse = row_logsumexp(row);
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::matrix(r, c, out), Op::LogSoftmax { x: x.0 }, ng)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = mat(self.val(x));
        let xs = self.val(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let lse = row_logsumexp(row);
            for j in 0..c {
                out[i * c + j] = (row[j] - lse).exp();
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::matrix(r, c, out), Op::Softmax { x: x.0 }, ng)
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let (r, c) = mat(self.val(x));
        let xs = self.val(x).data();
        let mut out = Vec::with_capacity(r * c * times);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(&xs[i * c..(i + 1) * c]);
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::matrix(r * times, c, out), Op::RepeatRows { x: x.0, times }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let (r, c) = mat(self.val(x));
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(DiffError::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let xs = self.val(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(idx.len(), c, out), Op::GatherRows { x: x.0, idx: idx.to_vec() }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let r = parts.first().map(|p| self.val(*p).rows()).ok_or_else(|| DiffError::shape("concat_cols", "no parts"))?;
        if parts.iter().any(|p| self.val(*p).rows() != r) {
            return Err(DiffError::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.val(*p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.val(*p).row(i));
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Tensor::matrix(r, total, out), Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let c = parts.first().map(|p| self.val(*p).cols()).ok_or_else(|| DiffError::shape("concat_rows", "no parts"))?;
        if parts.iter().any(|p| self.val(*p).cols() != c) {
            return Err(DiffError::shape("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.val(*p).data());
        }
        let r = out.len() / c;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Tensor::matrix(r, c, out), Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let (r, c) = mat(self.val(x));
        if len == 0 || start + len > c {
            return Err(DiffError::shape("slice_cols", format!("[{start}, {}) of {c}", start + len)));
        }
        let xs = self.val(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xs[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(r, len, out), Op::SliceCols { x: x.0, start }, ng))
    }

    /// Picks, for each row `i`, the column block `blocks[i]` of width `group`.
    pub fn select_blocks(&mut self, x: Var, blocks: &[usize], group: usize) -> Result<Var, DiffError> {
        let (r, c) = mat(self.val(x));
        if blocks.len() != r || group == 0 || c % group != 0 {
            return Err(DiffError::shape("select_blocks", format!("[{r}, {c}] with {} blocks of {group}", blocks.len())));
        }
        let k = c / group;
        if let Some(&bad) = blocks.iter().find(|&&b| b >= k) {
            return Err(DiffError::shape("select_blocks", format!("block {bad} of {k}")));
        }
        let xs = self.val(x).data();
        let mut out = Vec::with_capacity(r * group);
        for (i, &b) in blocks.iter().enumerate() {
            out.extend_from_slice(&xs[i * c + b * group..i * c + (b + 1) * group]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::matrix(r, group, out),
            Op::SelectBlocks { x: x.0, blocks: blocks.to_vec(), group },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Backward, DiffError> {
        let lt = self.val(loss);
        if lt.len() != 1 {
            return Err(DiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Backward { grads, params: self.param_nodes.clone(), shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].needs_grad;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[j].needs_grad {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { x, w } => {
                let (r, k) = mat(&nodes[*x].value);
                let n = nodes[*w].value.shape()[1];
                let xv = nodes[*x].value.data();
                let wv = nodes[*w].value.data();
                if needs(*x) {
                    acc(*x, &mut |dx| gemm(r, n, k, g, n as isize, 1, wv, 1, n as isize, 1.0, dx));
                }
                if needs(*w) {
                    acc(*w, &mut |dw| gemm(k, r, n, xv, 1, k as isize, g, n as isize, 1, 1.0, dw));
                }
            }
            Op::AddRow { x, b } => {
                let n = nodes[*b].value.len();
                acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += v));
                acc(*b, &mut |db| {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += v));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += v));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += v));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            Op::Mul { a, b } => {
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::Div { a, b } => {
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                });
            }
            Op::MulScalarVar { x, s } => {
                let sv = nodes[*s].value.item();
                let xv = nodes[*x].value.data();
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += v * sv));
                acc(*s, &mut |d| d[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>());
            }
            Op::DivScalarVar { x, s } => {
                let sv = nodes[*s].value.item();
                let xv = nodes[*x].value.data();
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += v / sv));
                acc(*s, &mut |d| d[0] -= g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>() / (sv * sv));
            }
            Op::Scale { x, c } => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += v * c)),
            Op::AddScalar { x } => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += v)),
            Op::Square { x } => {
                let xv = nodes[*x].value.data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += 2.0 * xv[k] * g[k];
                    }
                });
            }
            Op::Exp { x } => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += out[k] * g[k];
                }
            }),
            Op::Log { x } => {
                let xv = nodes[*x].value.data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / xv[k];
                    }
                });
            }
            Op::Tanh { x } => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += (1.0 - out[k] * out[k]) * g[k];
                }
            }),
            Op::Elu { x } => {
                let xv = nodes[*x].value.data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += if xv[k] > 0.0 { g[k] } else { (out[k] + 1.0) * g[k] };
                    }
                });
            }
            Op::Softplus { x } => {
                let xv = nodes[*x].value.data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += sigmoid(xv[k]) * g[k];
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std, floored } => {
                let c = nodes[*x].value.cols();
                let r = inv_std.len();
                let gv = nodes[*gamma].value.data();
                acc(*gamma, &mut |d| {
                    for k in 0..r * c {
                        d[k % c] += g[k] * xhat[k];
                    }
                });
                acc(*beta, &mut |d| {
                    for k in 0..r * c {
                        d[k % c] += g[k];
                    }
                });
                acc(*x, &mut |d| {
                    let mut gh = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gh[j] = g[i * c + j] * gv[j];
                        }
                        let mean_g = gh.iter().sum::<f64>() / c as f64;
                        let mean_gx = if floored[i] {
                            0.0
                        } else {
                            gh.iter().zip(&xhat[i * c..(i + 1) * c]).map(|(a, b)| a * b).sum::<f64>() / c as f64
                        };
                        for j in 0..c {
                            d[i * c + j] += inv_std[i] * (gh[j] - mean_g - xhat[i * c + j] * mean_gx);
                        }
                    }
                });
            }
            Op::SumAll { x } => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::MeanAll { x } => {
                let n = nodes[*x].value.len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::GroupSum { x, group } => acc(*x, &mut |d| {
                for (k, v) in d.iter_mut().enumerate() {
                    *v += g[k / group];
                }
            }),
            Op::BlockSum { x, group } => {
                let c = nodes[*x].value.cols();
                acc(*x, &mut |d| {
                    for (k, v) in d.iter_mut().enumerate() {
                        let (i, j) = (k / c, k % c);
                        *v += g[i * group + j % group];
                    }
                });
            }
            Op::TileCols { x, times } => {
                let c = nodes[*x].value.cols();
                acc(*x, &mut |d| {
                    for (k, v) in g.iter().enumerate() {
                        let (i, j) = (k / (c * times), k % (c * times));
                        d[i * c + j % c] += v;
                    }
                });
            }
            Op::RepeatCols { x, times } => acc(*x, &mut |d| {
                for (k, v) in g.iter().enumerate() {
                    d[k / times] += v;
                }
            }),
            Op::LogSumExp { x } => {
                let c = nodes[*x].value.cols();
                let xv = nodes[*x].value.data();
                acc(*x, &mut |d| {
                    for i in 0..out.len() {
                        if out[i] == f64::NEG_INFINITY || !out[i].is_finite() {
                            continue;
                        }
                        for j in 0..c {
                            d[i * c + j] += g[i] * (xv[i * c + j] - out[i]).exp();
                        }
                    }
                });
            }
            Op::LogSoftmax { x } => {
                let c = nodes[*x].value.cols();
                acc(*x, &mut |d| {
                    for i in 0..out.len() / c {
                        let gs: f64 = g[i * c..(i + 1) * c].iter().sum();
                        for j in 0..c {
                            d[i * c + j] += g[i * c + j] - out[i * c + j].exp() * gs;
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let c = nodes[*x].value.cols();
                acc(*x, &mut |d| {
                    for i in 0..out.len() / c {
                        let dot: f64 = (0..c).map(|j| g[i * c + j] * out[i * c + j]).sum();
                        for j in 0..c {
                            d[i * c + j] += out[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                });
            }
            Op::RepeatRows { x, times } => {
                let c = nodes[*x].value.cols();
                acc(*x, &mut |d| {
                    for (k, v) in g.iter().enumerate() {
                        let (row, j) = (k / c, k % c);
                        d[(row / times) * c + j] += v;
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = nodes[*x].value.cols();
                acc(*x, &mut |d| {
                    for (o, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[src * c + j] += g[o * c + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p].value.cols();
                    acc(p, &mut |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p].value.len();
                    acc(p, &mut |d| d.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, v)| *d += v));
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let c = nodes[*x].value.cols();
                let len = node.value.cols();
                acc(*x, &mut |d| {
                    for i in 0..node.value.rows() {
                        for j in 0..len {
                            d[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::SelectBlocks { x, blocks, group } => {
                let c = nodes[*x].value.cols();
                acc(*x, &mut |d| {
                    for (i, &b) in blocks.iter().enumerate() {
                        for j in 0..*group {
                            d[i * c + b * group + j] += g[i * group + j];
                        }
                    }
                });
            }
        }
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Backward {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(u64, String, usize)>,
    shapes: Vec<Vec<usize>>,
}

impl Backward {
    /// Gradient with respect to any node (zeros when unreachable).
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients for every parameter of `store` that was placed on the tape.
    /// Frozen or unreachable parameters receive zeros.
    pub fn grads_for(&self, store: &ParamStore) -> Gradients {
        let mut out = Gradients::new();
        for (id, name, node) in &self.params {
            if *id == store.id() {
                out.insert(name.clone(), self.wrt(Var(*node)));
            }
        }
        out
    }
}
