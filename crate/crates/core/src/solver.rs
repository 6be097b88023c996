//! First-order primal-dual solver for the coupled reconstruction problem.
//!
//! With K(u, v) = (∇u − v, E v, T₁u₁, …, T_N u_N) the iteration is
//!
//! ```text
//! p   ← proj_{α₁}(p + σ(∇ū − v̄))
//! q   ← proj_{α₀}(q + σ E v̄)
//! r_i ← prox of the conjugate discrepancy at r_i + σ T_i ū_i
//! u⁺  ← proj_{≥0 on KL channels}(u − τ(−div p + Σ T_i* r_i))
//! v⁺  ← v − τ(−p − div_sym q)
//! ū   ← 2u⁺ − u,  v̄ ← 2v⁺ − v
//! ```
//!
//! and the analogous scheme for the wavelet and quadratic regularizers.
//!
//! Each channel operator is internally rescaled to unit norm (data, background
//! and λ are rescaled to match, so the minimizer is unchanged). Without this,
//! one large operator such as a Radon transform would force tiny steps on the
//! whole saddle system.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::coupling::{
    group_l21_norm, haar_forward, haar_inverse, project_dual_ball_sym_in_place,
    project_dual_ball_vector_in_place, project_group_l2ball_in_place,
};
use crate::diffops::{div_into, grad_into, op_norm_estimate, sym_div_into, sym_grad_into, LinearOp};
use crate::discrepancy::{eval_kl, eval_l2sq, project_nonneg_in_place, prox_kl_dual_in_place, prox_l2_dual_in_place};
use crate::error::{shape_err, Error, Result};
use crate::forward::ForwardOp;
use crate::grid::{coupled_l1_norm, sym_weights, Coupling, Grid, MultiImage, SymTensorField, VectorField};
use crate::io::MfiRecord;
use crate::problem::{DiscrepancyKind, Problem, Regularizer};

/// Safety factor applied to the power-iteration estimate of ‖K‖.
pub const NORM_SAFETY: f64 = 1.01;
/// Steps are σ = τ = STEP_FRACTION / ‖K‖.
pub const STEP_FRACTION: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepPolicy {
    Constant,
    /// Residual balancing that keeps σ·τ fixed.
    Adaptive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Relative change ‖u⁺ − u‖/‖u‖ below which an iteration counts as stalled.
    pub tol: f64,
    /// Consecutive stalled iterations required to stop.
    pub patience: usize,
    pub step_policy: StepPolicy,
    /// Seed of the operator norm power iteration.
    pub seed: u64,
    pub norm_iters: usize,
    pub normalize_operators: bool,
    /// Start from the channelwise backprojection T_i* f_i / ‖K‖ instead of
    /// zero (ignored when an explicit starting image is passed).
    pub warm_start: bool,
    /// Record energies every this many iterations (0 disables recording,
    /// the final iterate is always recorded).
    pub record_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            tol: 1e-6,
            patience: 10,
            step_policy: StepPolicy::Constant,
            seed: 0,
            norm_iters: 100,
            normalize_operators: true,
            warm_start: false,
            record_every: 1,
        }
    }
}

/// Regularizer-specific primal and dual variables.
#[derive(Clone, Debug, PartialEq)]
pub enum RegState {
    Tgv {
        v: VectorField,
        v_bar: VectorField,
        p: VectorField,
        q: SymTensorField,
    },
    Wavelet {
        s: MultiImage,
    },
    Quadratic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub u: MultiImage,
    pub u_bar: MultiImage,
    pub reg: RegState,
    /// Dual variables of the data terms, in the rescaled operator space.
    pub r: Vec<Vec<f64>>,
    pub sigma: f64,
    pub tau: f64,
    pub iteration: usize,
    pub stall: usize,
}

impl SolverState {
    pub fn v(&self) -> Option<&VectorField> {
        match &self.reg {
            RegState::Tgv { v, .. } => Some(v),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnergyParts {
    pub regularizer: f64,
    /// Unweighted discrepancy per data channel: ‖T u − f‖² or KL(T u + c, f).
    pub data: Vec<f64>,
    /// Regularizer plus Σ λ_i · data_i (hard constraints contribute nothing)
    /// plus the nonnegativity indicator.
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub iterations: Vec<usize>,
    pub energy: Vec<f64>,
    pub regularizer: Vec<f64>,
    pub data_terms: Vec<Vec<f64>>,
    pub rel_change: Vec<f64>,
    pub sigma: Vec<f64>,
    pub tau: Vec<f64>,
    pub elapsed_secs: Vec<f64>,
}

impl Diagnostics {
    /// CSV without timing columns, so repeated runs produce identical files.
    pub fn to_csv(&self) -> String {
        let n = self.data_terms.first().map_or(0, Vec::len);
        let mut out = String::from("iteration,energy,regularizer,rel_change,sigma,tau");
        for i in 1..=n {
            let _ = write!(out, ",data_{i}");
        }
        out.push('\n');
        for k in 0..self.iterations.len() {
            let _ = write!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e}",
                self.iterations[k], self.energy[k], self.regularizer[k], self.rel_change[k], self.sigma[k], self.tau[k]
            );
            for d in &self.data_terms[k] {
                let _ = write!(out, ",{d:e}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SolveOutput {
    pub state: SolverState,
    pub diagnostics: Diagnostics,
    pub converged: bool,
}

impl SolveOutput {
    pub fn u(&self) -> &MultiImage {
        &self.state.u
    }
}

/// Discrepancy value in the original (unscaled) units.
fn discrepancy(kind: DiscrepancyKind, tu: &[f64], data: &[f64], background: &[f64]) -> f64 {
    match kind {
        DiscrepancyKind::Norm2Squared => eval_l2sq(tu, data),
        DiscrepancyKind::KullbackLeibler => {
            if background.is_empty() {
                eval_kl(tu, data, None)
            } else {
                let shifted: Vec<f64> = tu.iter().zip(background).map(|(a, b)| a + b).collect();
                eval_kl(&shifted, data, None)
            }
        }
    }
}

fn regularizer_value(problem: &Problem, u: &MultiImage, v: Option<&VectorField>) -> Result<f64> {
    match problem.regularizer() {
        Regularizer::Tgv {
            alpha0,
            alpha1,
            coupling,
        } => {
            let v = v.ok_or_else(|| Error::InvalidArgument("TGV energy needs the auxiliary field v".into()))?;
            if v.grid() != u.grid() || v.channels() != u.channels() {
                return shape_err("v does not match u");
            }
            let mut g = VectorField::zeros(u.grid(), u.channels());
            grad_into(u, &mut g);
            g.axpy(-1.0, v);
            let mut e = SymTensorField::zeros(u.grid(), u.channels());
            sym_grad_into(v, &mut e);
            Ok(alpha1 * coupled_l1_norm(&g, *coupling)? + alpha0 * coupled_l1_norm(&e, Coupling::Frobenius)?)
        }
        Regularizer::WaveletL21 { levels, alpha } => Ok(alpha * group_l21_norm(&haar_forward(u, *levels)?)),
        Regularizer::Quadratic { weight } => Ok(0.5 * weight * u.values().iter().map(|x| x * x).sum::<f64>()),
    }
}

/// Energy split into regularizer and per-channel discrepancies. For TGV the
/// auxiliary field `v` is required.
pub fn energy_parts(problem: &Problem, u: &MultiImage, v: Option<&VectorField>) -> Result<EnergyParts> {
    if u.grid() != problem.grid() || u.channels() != problem.channels() {
        return shape_err("image does not match the problem grid");
    }
    let regularizer = regularizer_value(problem, u, v)?;
    let mut total = regularizer;
    let mut data = Vec::with_capacity(problem.data().len());
    for (i, (ch, op)) in problem.data().iter().zip(problem.ops()).enumerate() {
        let tu = op.forward_unchecked(&u.channel(i));
        let d = discrepancy(ch.kind, &tu, &ch.data, &ch.background);
        if ch.lambda.is_finite() {
            total += ch.lambda * d;
        }
        data.push(d);
    }
    for c in problem.kl_channels() {
        if u.channel(c).iter().any(|&x| x < 0.0) {
            total = f64::INFINITY;
        }
    }
    Ok(EnergyParts {
        regularizer,
        data,
        total,
    })
}

/// Objective value at (u, v).
pub fn primal_energy(problem: &Problem, u: &MultiImage, v: Option<&VectorField>) -> Result<f64> {
    Ok(energy_parts(problem, u, v)?.total)
}

/// A data channel in the rescaled space: T' = s·T, f' = s·f, c' = s·c and
/// λ' = λ/s² (squared norm) or λ/s (Kullback-Leibler).
#[derive(Debug)]
struct ScaledChannel<'a> {
    op: &'a ForwardOp,
    scale: f64,
    data: Vec<f64>,
    background: Vec<f64>,
    lambda: f64,
    kind: DiscrepancyKind,
}

impl ScaledChannel<'_> {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.op.forward_unchecked(x);
        if self.scale != 1.0 {
            y.iter_mut().for_each(|v| *v *= self.scale);
        }
        y
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut x = self.op.adjoint_unchecked(y);
        if self.scale != 1.0 {
            x.iter_mut().for_each(|v| *v *= self.scale);
        }
        x
    }
}

/// The saddle-point operator K in the rescaled space, as a flat linear map.
pub struct SaddleOperator<'a> {
    grid: Grid,
    channels: usize,
    tgv: bool,
    wavelet_levels: Option<usize>,
    data: Vec<ScaledChannel<'a>>,
}

impl SaddleOperator<'_> {
    fn u_len(&self) -> usize {
        self.grid.sites() * self.channels
    }
    fn v_len(&self) -> usize {
        if self.tgv {
            self.u_len() * self.grid.ndim()
        } else {
            0
        }
    }
    fn q_len(&self) -> usize {
        if self.tgv {
            self.u_len() * self.grid.sym_len()
        } else {
            0
        }
    }
    fn s_len(&self) -> usize {
        if self.wavelet_levels.is_some() {
            self.u_len()
        } else {
            0
        }
    }
    fn reg_codomain_len(&self) -> usize {
        self.v_len() + self.q_len() + self.s_len()
    }
}

impl LinearOp for SaddleOperator<'_> {
    fn domain_len(&self) -> usize {
        self.u_len() + self.v_len()
    }

    fn codomain_len(&self) -> usize {
        self.reg_codomain_len() + self.data.iter().map(|c| c.op.codomain_len()).sum::<usize>()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (ux, vx) = x.split_at(self.u_len());
        let u = MultiImage::from_values(&self.grid, self.channels, ux.to_vec()).expect("saddle input");
        let mut out = Vec::with_capacity(self.codomain_len());
        if self.tgv {
            let v = VectorField::from_values(&self.grid, self.channels, vx.to_vec()).expect("saddle input");
            let mut g = VectorField::zeros(&self.grid, self.channels);
            grad_into(&u, &mut g);
            g.axpy(-1.0, &v);
            out.extend_from_slice(g.values());
            let mut e = SymTensorField::zeros(&self.grid, self.channels);
            sym_grad_into(&v, &mut e);
            out.extend_from_slice(e.values());
        }
        if let Some(levels) = self.wavelet_levels {
            out.extend_from_slice(haar_forward(&u, levels).expect("wavelet levels").values());
        }
        for (i, ch) in self.data.iter().enumerate() {
            out.extend(ch.forward(&u.channel(i)));
        }
        out
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut u = MultiImage::zeros(&self.grid, self.channels);
        let mut v_out = Vec::new();
        let mut pos = 0;
        if self.tgv {
            let p = VectorField::from_values(&self.grid, self.channels, y[..self.v_len()].to_vec()).expect("p");
            pos += self.v_len();
            let q = SymTensorField::from_values(&self.grid, self.channels, y[pos..pos + self.q_len()].to_vec())
                .expect("q");
            pos += self.q_len();
            div_into(&p, &mut u);
            u.scale(-1.0);
            let mut sd = VectorField::zeros(&self.grid, self.channels);
            sym_div_into(&q, &mut sd);
            sd.axpy(1.0, &p);
            sd.scale(-1.0);
            v_out = sd.into_values();
        }
        if let Some(levels) = self.wavelet_levels {
            let s = MultiImage::from_values(&self.grid, self.channels, y[pos..pos + self.s_len()].to_vec()).expect("s");
            pos += self.s_len();
            u.axpy(1.0, &haar_inverse(&s, levels).expect("wavelet levels"));
        }
        for (i, ch) in self.data.iter().enumerate() {
            let len = ch.op.codomain_len();
            let back = ch.adjoint(&y[pos..pos + len]);
            pos += len;
            let n = self.channels;
            for (s, b) in back.iter().enumerate() {
                u.values_mut()[s * n + i] += b;
            }
        }
        let mut out = u.into_values();
        out.extend(v_out);
        out
    }

    fn codomain_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        let w = sym_weights(self.grid.ndim());
        let (q0, q1) = (self.v_len(), self.v_len() + self.q_len());
        let mut acc = 0.0;
        for k in 0..a.len() {
            let weight = if k >= q0 && k < q1 { w[(k - q0) % w.len()] } else { 1.0 };
            acc += weight * a[k] * b[k];
        }
        acc
    }
}

/// A problem prepared for iteration: rescaled channels and step sizes.
pub struct Solver<'a> {
    problem: &'a Problem,
    config: SolverConfig,
    saddle: SaddleOperator<'a>,
    knorm: f64,
    kl_channels: Vec<usize>,
}

impl<'a> Solver<'a> {
    pub fn new(problem: &'a Problem, config: SolverConfig) -> Result<Self> {
        if !(config.tol >= 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance {} must be nonnegative", config.tol)));
        }
        if matches!(problem.regularizer(), Regularizer::Tgv { .. }) {
            problem.check_affine_injective()?;
        }
        let mut data = Vec::with_capacity(problem.data().len());
        for (i, (ch, op)) in problem.data().iter().zip(problem.ops()).enumerate() {
            let scale = if config.normalize_operators {
                let n = NORM_SAFETY * op_norm_estimate(op, config.norm_iters, config.seed.wrapping_add(i as u64 + 1));
                if n > 0.0 {
                    1.0 / n
                } else {
                    1.0
                }
            } else {
                1.0
            };
            let lambda = match ch.kind {
                DiscrepancyKind::Norm2Squared => ch.lambda / (scale * scale),
                DiscrepancyKind::KullbackLeibler => ch.lambda / scale,
            };
            let background = if ch.background.is_empty() {
                vec![0.0; ch.data.len()]
            } else {
                ch.background.iter().map(|c| c * scale).collect()
            };
            data.push(ScaledChannel {
                op,
                scale,
                data: ch.data.iter().map(|f| f * scale).collect(),
                background,
                lambda,
                kind: ch.kind,
            });
        }
        let saddle = SaddleOperator {
            grid: problem.grid().clone(),
            channels: problem.channels(),
            tgv: matches!(problem.regularizer(), Regularizer::Tgv { .. }),
            wavelet_levels: match problem.regularizer() {
                Regularizer::WaveletL21 { levels, .. } => Some(*levels),
                _ => None,
            },
            data,
        };
        let est = op_norm_estimate(&saddle, config.norm_iters, config.seed);
        let knorm = if est > 0.0 { NORM_SAFETY * est } else { 1.0 };
        Ok(Self {
            problem,
            config,
            saddle,
            knorm,
            kl_channels: problem.kl_channels(),
        })
    }

    pub fn problem(&self) -> &Problem {
        self.problem
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    /// ‖K‖ of the rescaled saddle operator, including the safety factor.
    pub fn operator_norm(&self) -> f64 {
        self.knorm
    }

    pub fn saddle_operator(&self) -> &SaddleOperator<'a> {
        &self.saddle
    }

    /// Scale factor applied to each channel operator.
    pub fn channel_scales(&self) -> Vec<f64> {
        self.saddle.data.iter().map(|c| c.scale).collect()
    }

    /// Zero duals and u = `warm_start` (or zero).
    pub fn initial_state(&self, warm_start: Option<&MultiImage>) -> Result<SolverState> {
        let grid = self.problem.grid();
        let n = self.problem.channels();
        let mut u = match warm_start {
            Some(w) => {
                if w.grid() != grid || w.channels() != n {
                    return shape_err("warm start does not match the problem grid");
                }
                w.clone()
            }
            None => {
                let mut u = MultiImage::zeros(grid, n);
                if self.config.warm_start {
                    for (i, ch) in self.saddle.data.iter().enumerate() {
                        let b: Vec<f64> = ch.adjoint(&ch.data).iter().map(|x| x / self.knorm).collect();
                        u.set_channel(i, &b);
                    }
                }
                u
            }
        };
        project_nonneg_in_place(&mut u, &self.kl_channels);
        let reg = match self.problem.regularizer() {
            Regularizer::Tgv { .. } => RegState::Tgv {
                v: VectorField::zeros(grid, n),
                v_bar: VectorField::zeros(grid, n),
                p: VectorField::zeros(grid, n),
                q: SymTensorField::zeros(grid, n),
            },
            Regularizer::WaveletL21 { .. } => RegState::Wavelet {
                s: MultiImage::zeros(grid, n),
            },
            Regularizer::Quadratic { .. } => RegState::Quadratic,
        };
        let step = STEP_FRACTION / self.knorm;
        Ok(SolverState {
            u_bar: u.clone(),
            u,
            reg,
            r: self.saddle.data.iter().map(|c| vec![0.0; c.data.len()]).collect(),
            sigma: step,
            tau: step,
            iteration: 0,
            stall: 0,
        })
    }

    fn check_state(&self, state: &SolverState) -> Result<()> {
        let grid = self.problem.grid();
        let n = self.problem.channels();
        let ok_img = |m: &MultiImage| m.grid() == grid && m.channels() == n;
        if !ok_img(&state.u) || !ok_img(&state.u_bar) {
            return shape_err("state image does not match the problem");
        }
        if state.r.len() != self.saddle.data.len()
            || state.r.iter().zip(&self.saddle.data).any(|(r, c)| r.len() != c.data.len())
        {
            return shape_err("state duals do not match the data channels");
        }
        let reg_ok = match (&state.reg, self.problem.regularizer()) {
            (RegState::Tgv { v, v_bar, p, q }, Regularizer::Tgv { .. }) => {
                [v, v_bar, p].iter().all(|f| f.grid() == grid && f.channels() == n)
                    && q.grid() == grid
                    && q.channels() == n
            }
            (RegState::Wavelet { s }, Regularizer::WaveletL21 { .. }) => ok_img(s),
            (RegState::Quadratic, Regularizer::Quadratic { .. }) => true,
            _ => false,
        };
        if !reg_ok {
            return shape_err("state does not match the regularizer");
        }
        if !(state.sigma > 0.0 && state.tau > 0.0) {
            return Err(Error::InvalidArgument("step sizes must be positive".into()));
        }
        Ok(())
    }

    /// Dual updates of the data terms; returns Σ_i T_i* r_i as an image.
    fn data_dual_step(&self, state: &mut SolverState) -> MultiImage {
        let n = self.problem.channels();
        let sigma = state.sigma;
        let mut back = MultiImage::zeros(self.problem.grid(), n);
        for (i, ch) in self.saddle.data.iter().enumerate() {
            let tu = ch.forward(&state.u_bar.channel(i));
            let r = &mut state.r[i];
            match ch.kind {
                DiscrepancyKind::Norm2Squared => {
                    for k in 0..r.len() {
                        r[k] += sigma * (tu[k] - ch.data[k]);
                    }
                    prox_l2_dual_in_place(r, sigma, 2.0 * ch.lambda);
                }
                DiscrepancyKind::KullbackLeibler => {
                    for k in 0..r.len() {
                        r[k] += sigma * (tu[k] + ch.background[k]);
                    }
                    prox_kl_dual_in_place(r, &ch.data, sigma, ch.lambda);
                }
            }
            let b = ch.adjoint(r);
            let vals = back.values_mut();
            for (s, x) in b.iter().enumerate() {
                vals[s * n + i] = *x;
            }
        }
        back
    }

    /// One primal-dual iteration. Returns ‖u⁺ − u‖ / max(‖u‖, tiny).
    pub fn pd_step(&self, state: &mut SolverState) -> Result<f64> {
        let grid = self.problem.grid().clone();
        let n = self.problem.channels();
        let (sigma, tau) = (state.sigma, state.tau);
        let adaptive = self.config.step_policy == StepPolicy::Adaptive;
        let old_duals = if adaptive { Some(self.dual_snapshot(state)) } else { None };
        let u_old = state.u.clone();

        let back = self.data_dual_step(state);
        let mut u_new = state.u.clone();
        let mut v_step = 0.0;
        match (self.problem.regularizer(), &mut state.reg) {
            (
                Regularizer::Tgv {
                    alpha0,
                    alpha1,
                    coupling,
                },
                RegState::Tgv { v, v_bar, p, q },
            ) => {
                let mut g = VectorField::zeros(&grid, n);
                grad_into(&state.u_bar, &mut g);
                g.axpy(-1.0, v_bar);
                p.axpy(sigma, &g);
                project_dual_ball_vector_in_place(p, *alpha1, *coupling);

                let mut e = SymTensorField::zeros(&grid, n);
                sym_grad_into(v_bar, &mut e);
                q.axpy(sigma, &e);
                project_dual_ball_sym_in_place(q, *alpha0);

                let mut dp = MultiImage::zeros(&grid, n);
                div_into(p, &mut dp);
                // u − τ(−div p + T*r)
                {
                    let uv = u_new.values_mut();
                    for ((x, d), b) in uv.iter_mut().zip(dp.values()).zip(back.values()) {
                        *x -= tau * (b - d);
                    }
                }
                project_nonneg_in_place(&mut u_new, &self.kl_channels);

                let mut sd = VectorField::zeros(&grid, n);
                sym_div_into(q, &mut sd);
                let v_old = v.clone();
                {
                    let vv = v.values_mut();
                    for ((x, a), b) in vv.iter_mut().zip(p.values()).zip(sd.values()) {
                        *x += tau * (a + b);
                    }
                }
                if adaptive {
                    let mut dv = v.clone();
                    dv.axpy(-1.0, &v_old);
                    v_step = dv.norm().powi(2);
                }
                let vb = v_bar.values_mut();
                for ((b, a), o) in vb.iter_mut().zip(v.values()).zip(v_old.values()) {
                    *b = 2.0 * a - o;
                }
            }
            (Regularizer::WaveletL21 { levels, alpha }, RegState::Wavelet { s }) => {
                s.axpy(sigma, &haar_forward(&state.u_bar, *levels)?);
                project_group_l2ball_in_place(s, *alpha);
                let ws = haar_inverse(s, *levels)?;
                let uv = u_new.values_mut();
                for ((x, a), b) in uv.iter_mut().zip(ws.values()).zip(back.values()) {
                    *x -= tau * (a + b);
                }
                project_nonneg_in_place(&mut u_new, &self.kl_channels);
            }
            (Regularizer::Quadratic { weight }, RegState::Quadratic) => {
                let denom = 1.0 + tau * weight;
                let uv = u_new.values_mut();
                for (x, b) in uv.iter_mut().zip(back.values()) {
                    *x = (*x - tau * b) / denom;
                }
                project_nonneg_in_place(&mut u_new, &self.kl_channels);
            }
            _ => return shape_err("state does not match the regularizer"),
        }

        let mut diff = u_new.clone();
        diff.axpy(-1.0, &u_old);
        let change = diff.norm();
        let rel = change / u_old.norm().max(1e-300);

        {
            let ub = state.u_bar.values_mut();
            for ((b, a), o) in ub.iter_mut().zip(u_new.values()).zip(u_old.values()) {
                *b = 2.0 * a - o;
            }
        }
        state.u = u_new;
        state.iteration += 1;

        if !state.u.is_finite() || !state.u_bar.is_finite() || !self.duals_finite(state) {
            return Err(Error::Divergence {
                iteration: state.iteration,
                reason: "non-finite iterate".into(),
            });
        }

        if let Some(old) = old_duals {
            let primal_res = (change * change + v_step).sqrt() / tau;
            let new = self.dual_snapshot(state);
            let dual_res = old.iter().zip(&new).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / sigma;
            let (s, t) = step_policy(StepPolicy::Adaptive, sigma, tau, primal_res, dual_res, self.knorm);
            state.sigma = s;
            state.tau = t;
        }
        Ok(rel)
    }

    fn dual_snapshot(&self, state: &SolverState) -> Vec<f64> {
        let mut out = Vec::new();
        match &state.reg {
            RegState::Tgv { p, q, .. } => {
                out.extend_from_slice(p.values());
                out.extend_from_slice(q.values());
            }
            RegState::Wavelet { s } => out.extend_from_slice(s.values()),
            RegState::Quadratic => {}
        }
        for r in &state.r {
            out.extend_from_slice(r);
        }
        out
    }

    fn duals_finite(&self, state: &SolverState) -> bool {
        let reg = match &state.reg {
            RegState::Tgv { v, v_bar, p, q } => v.is_finite() && v_bar.is_finite() && p.is_finite() && q.is_finite(),
            RegState::Wavelet { s } => s.is_finite(),
            RegState::Quadratic => true,
        };
        reg && state.r.iter().all(|r| r.iter().all(|x| x.is_finite()))
    }

    /// Energy of the current iterate in original units.
    pub fn energy(&self, state: &SolverState) -> Result<EnergyParts> {
        energy_parts(self.problem, &state.u, state.v())
    }

    fn record(&self, diag: &mut Diagnostics, state: &SolverState, rel: f64, start: &Instant) -> Result<()> {
        let e = self.energy(state)?;
        diag.iterations.push(state.iteration);
        diag.energy.push(e.total);
        diag.regularizer.push(e.regularizer);
        diag.data_terms.push(e.data);
        diag.rel_change.push(rel);
        diag.sigma.push(state.sigma);
        diag.tau.push(state.tau);
        diag.elapsed_secs.push(start.elapsed().as_secs_f64());
        Ok(())
    }

    /// Iterate from `state` until the stopping rule fires or the iteration
    /// counter reaches `max_iters` (counted from the start of the run, so a
    /// resumed state continues the same schedule).
    pub fn run(&self, mut state: SolverState) -> Result<SolveOutput> {
        self.run_until(&mut state, self.config.max_iters)
            .map(|(diagnostics, converged)| SolveOutput {
                state,
                diagnostics,
                converged,
            })
    }

    /// Like [`run`](Self::run) but stops at iteration `stop_at` (≤ max_iters);
    /// used to write checkpoints. Returns the diagnostics and whether the
    /// stopping rule fired.
    pub fn run_until(&self, state: &mut SolverState, stop_at: usize) -> Result<(Diagnostics, bool)> {
        self.check_state(state)?;
        let stop_at = stop_at.min(self.config.max_iters);
        let start = Instant::now();
        let mut diag = Diagnostics::default();
        let mut rel = f64::NAN;
        let mut converged = state.stall >= self.config.patience.max(1);
        while !converged && state.iteration < stop_at {
            rel = self.pd_step(state)?;
            if rel < self.config.tol {
                state.stall += 1;
            } else {
                state.stall = 0;
            }
            converged = state.stall >= self.config.patience.max(1);
            let every = self.config.record_every;
            if every > 0 && state.iteration.is_multiple_of(every) {
                self.record(&mut diag, state, rel, &start)?;
            }
        }
        if diag.iterations.last() != Some(&state.iteration) {
            self.record(&mut diag, state, rel, &start)?;
        }
        Ok((diag, converged))
    }
}

/// Convenience wrapper: build the solver, start from `warm_start` and run.
pub fn solve(problem: &Problem, config: SolverConfig, warm_start: Option<&MultiImage>) -> Result<SolveOutput> {
    let solver = Solver::new(problem, config)?;
    let state = solver.initial_state(warm_start)?;
    solver.run(state)
}

/// Step update. `Constant` returns the steps unchanged. `Adaptive` moves a
/// factor 1.05 between σ and τ when one residual exceeds ten times the other,
/// and never lets σ·τ exceed (0.99/‖K‖)².
pub fn step_policy(policy: StepPolicy, sigma: f64, tau: f64, primal_res: f64, dual_res: f64, knorm: f64) -> (f64, f64) {
    const FACTOR: f64 = 1.05;
    const RATIO: f64 = 10.0;
    match policy {
        StepPolicy::Constant => (sigma, tau),
        StepPolicy::Adaptive => {
            if !(primal_res.is_finite() && dual_res.is_finite()) {
                return (sigma, tau);
            }
            let (mut s, t) = if dual_res > RATIO * primal_res {
                (sigma * FACTOR, tau / FACTOR)
            } else if primal_res > RATIO * dual_res {
                (sigma / FACTOR, tau * FACTOR)
            } else {
                return (sigma, tau);
            };
            let bound = (STEP_FRACTION / knorm).powi(2);
            if s * t > bound {
                s = bound / t;
                while s * t > bound {
                    s = f64::from_bits(s.to_bits() - 1);
                }
            }
            (s, t)
        }
    }
}

const CHECKPOINT_FORMAT: &str = "mdrecon-checkpoint-1";

fn record_of(dims: &[usize], channels: usize, values: &[f64]) -> MfiRecord {
    MfiRecord {
        dims: dims.to_vec(),
        channels,
        values: values.to_vec(),
    }
}

/// Write the full iteration state to `dir` (created if missing). Floating
/// point scalars are stored as exact bit patterns, arrays as MFI1 files.
pub fn save_checkpoint(dir: impl AsRef<Path>, state: &SolverState) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let dims = state.u.grid().dims().to_vec();
    let n = state.u.channels();
    let mode = match &state.reg {
        RegState::Tgv { .. } => "tgv",
        RegState::Wavelet { .. } => "wavelet",
        RegState::Quadratic => "quadratic",
    };
    let spacing: Vec<String> = state.u.grid().spacing().iter().map(|h| format!("{:016x}", h.to_bits())).collect();
    let manifest = format!(
        "format={CHECKPOINT_FORMAT}\nmode={mode}\niteration={}\nstall={}\nsigma={:016x}\ntau={:016x}\nspacing={}\ndata_channels={}\n",
        state.iteration,
        state.stall,
        state.sigma.to_bits(),
        state.tau.to_bits(),
        spacing.join(","),
        state.r.len()
    );
    record_of(&dims, n, state.u.values()).write(dir.join("u.mfi"))?;
    record_of(&dims, n, state.u_bar.values()).write(dir.join("u_bar.mfi"))?;
    match &state.reg {
        RegState::Tgv { v, v_bar, p, q } => {
            let d = dims.len();
            let m = state.u.grid().sym_len();
            record_of(&dims, n * d, v.values()).write(dir.join("v.mfi"))?;
            record_of(&dims, n * d, v_bar.values()).write(dir.join("v_bar.mfi"))?;
            record_of(&dims, n * d, p.values()).write(dir.join("p.mfi"))?;
            record_of(&dims, n * m, q.values()).write(dir.join("q.mfi"))?;
        }
        RegState::Wavelet { s } => record_of(&dims, n, s.values()).write(dir.join("s.mfi"))?,
        RegState::Quadratic => {}
    }
    for (i, r) in state.r.iter().enumerate() {
        record_of(&[r.len()], 1, r).write(dir.join(format!("r_{}.mfi", i + 1)))?;
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

fn manifest_get<'m>(manifest: &'m str, key: &str) -> Result<&'m str> {
    manifest
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|rest| rest.strip_prefix('=')))
        .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks `{key}`")))
}

fn parse_bits(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Format(format!("bad float bits `{s}`")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Format(format!("bad integer `{s}`")))
}

/// Read a state written by [`save_checkpoint`].
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<SolverState> {
    let dir = dir.as_ref();
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    if manifest_get(&manifest, "format")? != CHECKPOINT_FORMAT {
        return Err(Error::Format("unknown checkpoint format".into()));
    }
    let spacing: Vec<f64> = manifest_get(&manifest, "spacing")?
        .split(',')
        .map(parse_bits)
        .collect::<Result<_>>()?;
    let u_rec = MfiRecord::read(dir.join("u.mfi"))?;
    let grid = Grid::with_spacing(&u_rec.dims, &spacing)?;
    let n = u_rec.channels;
    let image = |rec: MfiRecord| -> Result<MultiImage> {
        if rec.dims != grid.dims() || rec.channels != n {
            return Err(Error::Format("checkpoint arrays disagree in shape".into()));
        }
        MultiImage::from_values(&grid, n, rec.values)
    };
    let load_vec = |name: &str| -> Result<VectorField> {
        let rec = MfiRecord::read(dir.join(name))?;
        VectorField::from_values(&grid, n, rec.values)
    };
    let u = image(u_rec.clone())?;
    let u_bar = image(MfiRecord::read(dir.join("u_bar.mfi"))?)?;
    let reg = match manifest_get(&manifest, "mode")? {
        "tgv" => RegState::Tgv {
            v: load_vec("v.mfi")?,
            v_bar: load_vec("v_bar.mfi")?,
            p: load_vec("p.mfi")?,
            q: SymTensorField::from_values(&grid, n, MfiRecord::read(dir.join("q.mfi"))?.values)?,
        },
        "wavelet" => RegState::Wavelet {
            s: image(MfiRecord::read(dir.join("s.mfi"))?)?,
        },
        "quadratic" => RegState::Quadratic,
        other => return Err(Error::Format(format!("unknown checkpoint mode `{other}`"))),
    };
    let count = parse_usize(manifest_get(&manifest, "data_channels")?)?;
    let r = (1..=count)
        .map(|i| MfiRecord::read(dir.join(format!("r_{i}.mfi"))).map(|rec| rec.values))
        .collect::<Result<Vec<_>>>()?;
    Ok(SolverState {
        u,
        u_bar,
        reg,
        r,
        sigma: parse_bits(manifest_get(&manifest, "sigma")?)?,
        tau: parse_bits(manifest_get(&manifest, "tau")?)?,
        iteration: parse_usize(manifest_get(&manifest, "iteration")?)?,
        stall: parse_usize(manifest_get(&manifest, "stall")?)?,
    })
}
