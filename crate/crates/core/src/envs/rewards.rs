//! Shaped reward primitives and 2D containment tests.

/// atanh(√0.95): the scale at which `1 - tanh²` has decayed to 0.05.
pub fn stol_scale() -> f64 {
    0.95f64.sqrt().atanh()
}

/// Shaped tolerance: 1 inside `eps`, else a `1 - tanh²` tail that equals
/// 0.05 at `|v| = r`.
///
/// Implemented as written, so for `eps > 0` the value jumps at `|v| = eps`.
pub fn stol(v: f64, eps: f64, r: f64) -> f64 {
    let a = v.abs();
    if a < eps {
        return 1.0;
    }
    let t = (stol_scale() / r * a).tanh();
    1.0 - t * t
}

/// Saturating linear ramp from 0 at `eps_min` to 1 at `eps_max`.
pub fn slin(v: f64, eps_min: f64, eps_max: f64) -> f64 {
    if v < eps_min {
        0.0
    } else if v > eps_max {
        1.0
    } else {
        (v - eps_min) / (eps_max - eps_min)
    }
}

/// Binary tolerance, strict at the boundary.
pub fn btol(v: f64, eps: f64) -> f64 {
    if v.abs() < eps {
        1.0
    } else {
        0.0
    }
}

/// Axis-aligned box in the (x, z) plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Aabb {
    /// Cube of edge `size` resting with its bottom face at `pos[1]`,
    /// centred horizontally on `pos[0]`.
    pub fn cube(pos: [f64; 2], size: f64) -> Self {
        Self { lo: [pos[0] - 0.5 * size, pos[1]], hi: [pos[0] + 0.5 * size, pos[1] + size] }
    }
}

/// 1 when `a` lies entirely above the highest point of `b`.
pub fn above(a: &Aabb, b: &Aabb) -> f64 {
    if a.lo[1] >= b.hi[1] {
        1.0
    } else {
        0.0
    }
}

/// 1 when `a` lies entirely within `bounds`.
pub fn inside(a: &Aabb, bounds: &Aabb) -> f64 {
    let within = (0..2).all(|k| a.lo[k] >= bounds.lo[k] && a.hi[k] <= bounds.hi[k]);
    if within {
        1.0
    } else {
        0.0
    }
}
