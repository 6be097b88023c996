//! Finite-difference gradient and symmetrized gradient with their exact
//! negative adjoints, plus the generic linear-operator checks.
//!
//! `grad` uses forward differences with a zero difference at the last index
//! of each axis. `sym_grad` uses backward differences on the staggered grid:
//! for the diagonal entry ∂_a v_a the difference is taken for
//! 1 ≤ x_a ≤ n_a − 2 (the last entry of v_a sits where the gradient is
//! structurally zero), for off-diagonal derivatives ∂_a v_b for
//! 1 ≤ x_a ≤ n_a − 1. With this choice `sym_grad(grad(u)) = 0` for every
//! per-channel affine `u`. The divergences are the transposes of these
//! difference matrices, so the adjoint identities hold to roundoff.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{dot, sym_index, sym_weights, Grid, MultiImage, SymTensorField, VectorField};

/// Upper index of the backward difference of component `comp` along `axis`.
#[inline]
fn upper(n: usize, axis: usize, comp: usize) -> usize {
    if axis == comp {
        n.saturating_sub(2)
    } else {
        n - 1
    }
}

pub fn grad(u: &MultiImage) -> VectorField {
    let grid = u.grid();
    let mut out = VectorField::zeros(grid, u.channels());
    grad_into(u, &mut out);
    out
}

/// Writes `grad(u)` into `out` (shapes must agree).
pub fn grad_into(u: &MultiImage, out: &mut VectorField) {
    let grid = u.grid().clone();
    let d = grid.ndim();
    let n = u.channels();
    let dims = grid.dims();
    let strides = grid.strides();
    let inv_h: Vec<f64> = grid.spacing().iter().map(|h| 1.0 / h).collect();
    let uv = u.values();
    let ov = out.values_mut();
    for s in 0..grid.sites() {
        let x = grid.coords(s);
        for k in 0..d {
            let fwd = x[k] + 1 < dims[k];
            for c in 0..n {
                ov[(s * n + c) * d + k] = if fwd {
                    (uv[(s + strides[k]) * n + c] - uv[s * n + c]) * inv_h[k]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Negative adjoint of [`grad`].
pub fn div(p: &VectorField) -> MultiImage {
    let mut out = MultiImage::zeros(p.grid(), p.channels());
    div_into(p, &mut out);
    out
}

pub fn div_into(p: &VectorField, out: &mut MultiImage) {
    let grid = p.grid().clone();
    let d = grid.ndim();
    let n = p.channels();
    let dims = grid.dims();
    let strides = grid.strides();
    let inv_h: Vec<f64> = grid.spacing().iter().map(|h| 1.0 / h).collect();
    let pv = p.values();
    let ov = out.values_mut();
    for s in 0..grid.sites() {
        let x = grid.coords(s);
        for c in 0..n {
            let mut acc = 0.0;
            for k in 0..d {
                if x[k] + 1 < dims[k] {
                    acc += pv[(s * n + c) * d + k] * inv_h[k];
                }
                if x[k] >= 1 {
                    acc -= pv[((s - strides[k]) * n + c) * d + k] * inv_h[k];
                }
            }
            ov[s * n + c] = acc;
        }
    }
}

pub fn sym_grad(v: &VectorField) -> SymTensorField {
    let mut out = SymTensorField::zeros(v.grid(), v.channels());
    sym_grad_into(v, &mut out);
    out
}

pub fn sym_grad_into(v: &VectorField, out: &mut SymTensorField) {
    let grid = v.grid().clone();
    let d = grid.ndim();
    let m = grid.sym_len();
    let n = v.channels();
    let dims = grid.dims();
    let strides = grid.strides();
    let inv_h: Vec<f64> = grid.spacing().iter().map(|h| 1.0 / h).collect();
    let vv = v.values();
    let ov = out.values_mut();
    // backward difference of component `comp` along `axis` at site s
    let bdiff = |s: usize, x: &[usize; 3], c: usize, axis: usize, comp: usize| -> f64 {
        let hi = upper(dims[axis], axis, comp);
        if x[axis] >= 1 && x[axis] <= hi {
            (vv[(s * n + c) * d + comp] - vv[((s - strides[axis]) * n + c) * d + comp])
                * inv_h[axis]
        } else {
            0.0
        }
    };
    for s in 0..grid.sites() {
        let x = grid.coords(s);
        for c in 0..n {
            for a in 0..d {
                for b in a..d {
                    let val = if a == b {
                        bdiff(s, &x, c, a, a)
                    } else {
                        0.5 * (bdiff(s, &x, c, a, b) + bdiff(s, &x, c, b, a))
                    };
                    ov[(s * n + c) * m + sym_index(d, a, b)] = val;
                }
            }
        }
    }
}

/// Negative adjoint of [`sym_grad`] with respect to the weighted symmetric
/// inner product.
pub fn sym_div(q: &SymTensorField) -> VectorField {
    let mut out = VectorField::zeros(q.grid(), q.channels());
    sym_div_into(q, &mut out);
    out
}

pub fn sym_div_into(q: &SymTensorField, out: &mut VectorField) {
    let grid = q.grid().clone();
    let d = grid.ndim();
    let m = grid.sym_len();
    let n = q.channels();
    let dims = grid.dims();
    let strides = grid.strides();
    let inv_h: Vec<f64> = grid.spacing().iter().map(|h| 1.0 / h).collect();
    let qv = q.values();
    let ov = out.values_mut();
    for s in 0..grid.sites() {
        let x = grid.coords(s);
        for c in 0..n {
            for b in 0..d {
                // component b: Σ_a −D_aᵀ q_ab, D_a the backward difference of v_b along a
                let mut acc = 0.0;
                for a in 0..d {
                    let hi = upper(dims[a], a, b);
                    let idx = sym_index(d, a, b);
                    if x[a] < hi {
                        acc += qv[((s + strides[a]) * n + c) * m + idx] * inv_h[a];
                    }
                    if x[a] >= 1 && x[a] <= hi {
                        acc -= qv[(s * n + c) * m + idx] * inv_h[a];
                    }
                }
                ov[(s * n + c) * d + b] = acc;
            }
        }
    }
}

/// A linear map between flat real vectors with its adjoint.
///
/// Inner products default to the Euclidean one; operators whose spaces carry
/// a weighted inner product override `domain_dot`/`codomain_dot`, and
/// `adjoint` must then be the adjoint with respect to those.
pub trait LinearOp {
    fn domain_len(&self) -> usize;
    fn codomain_len(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn adjoint(&self, y: &[f64]) -> Vec<f64>;

    fn domain_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        dot(a, b)
    }

    fn codomain_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        dot(a, b)
    }
}

/// `factor · I` on R^n.
pub struct ScaledIdentity {
    pub len: usize,
    pub factor: f64,
}

impl LinearOp for ScaledIdentity {
    fn domain_len(&self) -> usize {
        self.len
    }
    fn codomain_len(&self) -> usize {
        self.len
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v * self.factor).collect()
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.apply(y)
    }
}

/// `grad` with adjoint `−div`.
pub struct GradOp {
    pub grid: Grid,
    pub channels: usize,
}

impl LinearOp for GradOp {
    fn domain_len(&self) -> usize {
        self.grid.sites() * self.channels
    }
    fn codomain_len(&self) -> usize {
        self.domain_len() * self.grid.ndim()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let u = MultiImage::from_values(&self.grid, self.channels, x.to_vec()).expect("grad input");
        grad(&u).into_values()
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let p = VectorField::from_values(&self.grid, self.channels, y.to_vec()).expect("grad adjoint input");
        let mut out = div(&p).into_values();
        out.iter_mut().for_each(|v| *v = -*v);
        out
    }
}

/// `sym_grad` with adjoint `−sym_div`.
pub struct SymGradOp {
    pub grid: Grid,
    pub channels: usize,
}

impl LinearOp for SymGradOp {
    fn domain_len(&self) -> usize {
        self.grid.sites() * self.channels * self.grid.ndim()
    }
    fn codomain_len(&self) -> usize {
        self.grid.sites() * self.channels * self.grid.sym_len()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let v = VectorField::from_values(&self.grid, self.channels, x.to_vec()).expect("sym_grad input");
        sym_grad(&v).into_values()
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let q = SymTensorField::from_values(&self.grid, self.channels, y.to_vec())
            .expect("sym_grad adjoint input");
        let mut out = sym_div(&q).into_values();
        out.iter_mut().for_each(|v| *v = -*v);
        out
    }
    fn codomain_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        let w = sym_weights(self.grid.ndim());
        a.iter()
            .zip(b)
            .enumerate()
            .map(|(k, (x, y))| w[k % w.len()] * x * y)
            .sum()
    }
}

fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Dot-product test: max over trials of
/// |⟨Ax, y⟩ − ⟨x, Aᵀy⟩| / (‖Ax‖·‖y‖ + tiny) for random x, y.
pub fn adjoint_check(op: &dyn LinearOp, trials: usize, seed: u64) -> f64 {
    let trials = trials.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let x = random_vec(&mut rng, op.domain_len());
        let y = random_vec(&mut rng, op.codomain_len());
        let ax = op.apply(&x);
        let aty = op.adjoint(&y);
        let lhs = op.codomain_dot(&ax, &y);
        let rhs = op.domain_dot(&x, &aty);
        let scale = op.codomain_dot(&ax, &ax).sqrt() * op.codomain_dot(&y, &y).sqrt();
        let err = (lhs - rhs).abs() / (scale + f64::MIN_POSITIVE);
        worst = worst.max(err);
    }
    worst
}

/// Power-iteration estimate of the largest singular value ‖K‖.
///
/// Returns the Rayleigh quotient ‖K x_k‖ of the normalized iterate, which is
/// nondecreasing in `iters` for the power method on KᵀK.
pub fn op_norm_estimate(op: &dyn LinearOp, iters: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = random_vec(&mut rng, op.domain_len());
    let mut est = 0.0;
    for _ in 0..iters.max(1) {
        let nx = op.domain_dot(&x, &x).sqrt();
        if nx == 0.0 {
            return 0.0;
        }
        x.iter_mut().for_each(|v| *v /= nx);
        let kx = op.apply(&x);
        est = op.codomain_dot(&kx, &kx).sqrt();
        if est == 0.0 {
            return 0.0;
        }
        x = op.adjoint(&kx);
    }
    est
}
