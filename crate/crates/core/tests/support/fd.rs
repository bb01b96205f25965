//! Central finite-difference gradient oracle.
#![allow(dead_code)]

use rand::Rng;
use rhpo_core::diffmath::{ParamStore, Tape, Tensor, Var};

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1)`: relative for gradients of magnitude above
/// one, absolute below.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Worst element-wise error between the tape gradient of `build` and a
/// central difference with step [`STEP`] for every input.
pub fn max_error<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let back = tape.backward(loss).expect("scalar loss");
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).item()
    };
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = back.wrt(*v);
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] = orig - STEP;
            let down = eval(&xs);
            xs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Reduces any tensor to a scalar through fixed irregular weights so that
/// the full Jacobian is exercised.
pub fn project(tape: &mut Tape, x: Var) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let w: Vec<f64> = (0..n).map(|i| (0.37 + 1.618 * i as f64).sin() + 0.25).collect();
    let w = tape.constant(Tensor::new(shape, w).expect("projection shape"));
    let p = tape.mul(x, w).expect("same shape");
    tape.sum(p)
}

/// Draws whose elu inputs come this close to zero are skipped: a step on a
/// parameter can carry them across the kink.
pub const KINK_MARGIN: f64 = 0.01;

/// Worst error over `per_param` random coordinates of every parameter in
/// the store that `store` selects from `obj`, or `None` when the draw sits
/// too close to an elu kink.
pub fn store_error<T, S, F, R>(obj: &T, store: S, per_param: usize, rng: &mut R, loss: F) -> Option<f64>
where
    T: Clone,
    S: Fn(&mut T) -> &mut ParamStore,
    F: Fn(&T, &mut Tape) -> Var,
    R: Rng,
{
    let mut base = obj.clone();
    let mut t = Tape::new();
    let l = loss(&base, &mut t);
    if t.kink_margin() < KINK_MARGIN {
        return None;
    }
    let g = t.backward(l).expect("scalar loss").grads_for(store(&mut base));
    assert!(!g.is_empty(), "loss does not read the selected store");
    let mut worst = 0.0f64;
    for (name, grad) in g.iter() {
        for _ in 0..per_param {
            let k = rng.gen_range(0..grad.len());
            let f = |delta: f64| {
                let mut q = base.clone();
                store(&mut q).get_mut(name).unwrap().data_mut()[k] += delta;
                let mut t = Tape::no_grad();
                let l = loss(&q, &mut t);
                t.value(l).item()
            };
            let numeric = (f(STEP) - f(-STEP)) / (2.0 * STEP);
            worst = worst.max(rel_err(grad.data()[k], numeric));
        }
    }
    Some(worst)
}
