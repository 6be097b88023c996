//! Problem description: data channels, regularizer and their validation.

use crate::error::{shape_err, Error, Result};
use crate::forward::{ForwardOp, ForwardOpSpec};
use crate::grid::{Coupling, Grid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DiscrepancyKind {
    /// λ‖T u − f‖²₂
    Norm2Squared,
    /// λ KL(T u + c, f)
    KullbackLeibler,
}

impl DiscrepancyKind {
    pub fn name(self) -> &'static str {
        match self {
            DiscrepancyKind::Norm2Squared => "l2",
            DiscrepancyKind::KullbackLeibler => "kl",
        }
    }
}

/// One measured channel. Channel `i` of the problem acts on channel `i` of
/// the unknown image.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSpec {
    pub operator: ForwardOpSpec,
    pub data: Vec<f64>,
    /// Positive weight; `f64::INFINITY` marks a hard data constraint.
    pub lambda: f64,
    pub kind: DiscrepancyKind,
    /// Additive background, used by Kullback-Leibler channels only. Empty
    /// means zero.
    pub background: Vec<f64>,
}

impl ChannelSpec {
    pub fn l2(operator: ForwardOpSpec, data: Vec<f64>, lambda: f64) -> Self {
        Self {
            operator,
            data,
            lambda,
            kind: DiscrepancyKind::Norm2Squared,
            background: Vec::new(),
        }
    }

    pub fn kl(operator: ForwardOpSpec, data: Vec<f64>, lambda: f64, background: Vec<f64>) -> Self {
        Self {
            operator,
            data,
            lambda,
            kind: DiscrepancyKind::KullbackLeibler,
            background,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Regularizer {
    /// α₁‖∇u − v‖₁ + α₀‖E v‖₁ minimized over v.
    Tgv {
        alpha0: f64,
        alpha1: f64,
        coupling: Coupling,
    },
    /// α‖W u‖_{2,1} with an orthonormal Haar transform.
    WaveletL21 { levels: usize, alpha: f64 },
    /// (weight/2)‖u‖²₂
    Quadratic { weight: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub grid: Grid,
    pub channels: usize,
    pub regularizer: Regularizer,
    /// Either empty (regularizer only) or one entry per image channel.
    pub data: Vec<ChannelSpec>,
}

/// A validated problem with its operators instantiated.
#[derive(Debug)]
pub struct Problem {
    spec: ProblemSpec,
    ops: Vec<ForwardOp>,
}

fn positive(x: f64, what: &str) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} must be positive and finite, got {x}")))
    }
}

impl Problem {
    pub fn new(spec: ProblemSpec) -> Result<Self> {
        if spec.channels == 0 {
            return Err(Error::InvalidArgument("problem needs at least one channel".into()));
        }
        match &spec.regularizer {
            Regularizer::Tgv { alpha0, alpha1, .. } => {
                positive(*alpha0, "alpha0")?;
                positive(*alpha1, "alpha1")?;
            }
            Regularizer::WaveletL21 { levels, alpha } => {
                positive(*alpha, "wavelet alpha")?;
                let block = 1usize << (*levels).min(31);
                if spec.grid.dims().iter().any(|n| n % block != 0) {
                    return Err(Error::InvalidArgument(format!(
                        "grid {:?} not divisible by 2^{levels}",
                        spec.grid.dims()
                    )));
                }
            }
            Regularizer::Quadratic { weight } => positive(*weight, "quadratic weight")?,
        }
        if !spec.data.is_empty() && spec.data.len() != spec.channels {
            return shape_err(format!(
                "{} data channels for a {}-channel image",
                spec.data.len(),
                spec.channels
            ));
        }
        let mut ops = Vec::with_capacity(spec.data.len());
        for (i, ch) in spec.data.iter().enumerate() {
            let op = ForwardOp::new(ch.operator.clone(), &spec.grid)?;
            if ch.data.len() != op.codomain_len() {
                return shape_err(format!(
                    "channel {}: data has {} entries, operator codomain {}",
                    i + 1,
                    ch.data.len(),
                    op.codomain_len()
                ));
            }
            if !(ch.lambda > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "channel {}: lambda must be positive, got {}",
                    i + 1,
                    ch.lambda
                )));
            }
            if ch.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("channel {} data", i + 1)));
            }
            if ch.kind == DiscrepancyKind::KullbackLeibler {
                if ch.data.iter().any(|&x| x < 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "channel {}: Kullback-Leibler data must be nonnegative",
                        i + 1
                    )));
                }
                if !ch.background.is_empty() {
                    if ch.background.len() != ch.data.len() {
                        return shape_err(format!(
                            "channel {}: background has {} entries, data {}",
                            i + 1,
                            ch.background.len(),
                            ch.data.len()
                        ));
                    }
                    if ch.background.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                        return Err(Error::InvalidArgument(format!(
                            "channel {}: background must be nonnegative",
                            i + 1
                        )));
                    }
                }
            }
            ops.push(op);
        }
        Ok(Self { spec, ops })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn grid(&self) -> &Grid {
        &self.spec.grid
    }

    pub fn channels(&self) -> usize {
        self.spec.channels
    }

    pub fn regularizer(&self) -> &Regularizer {
        &self.spec.regularizer
    }

    pub fn data(&self) -> &[ChannelSpec] {
        &self.spec.data
    }

    pub fn ops(&self) -> &[ForwardOp] {
        &self.ops
    }

    /// Indices of Kullback-Leibler channels (these are constrained to be
    /// nonnegative).
    pub fn kl_channels(&self) -> Vec<usize> {
        self.spec
            .data
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == DiscrepancyKind::KullbackLeibler)
            .map(|(i, _)| i)
            .collect()
    }

    /// Requires each channel operator to be injective on affine functions,
    /// the kernel of TGV².
    pub fn check_affine_injective(&self) -> Result<()> {
        if self.ops.is_empty() {
            return Err(Error::Precondition(
                "TGV needs a data term on every channel to fix the affine kernel".into(),
            ));
        }
        let grid = &self.spec.grid;
        let d = grid.ndim();
        let basis: Vec<Vec<f64>> = (0..=d)
            .map(|k| {
                (0..grid.sites())
                    .map(|s| if k == 0 { 1.0 } else { grid.coords(s)[k - 1] as f64 })
                    .collect()
            })
            .collect();
        for (i, op) in self.ops.iter().enumerate() {
            let images: Vec<Vec<f64>> = basis.iter().map(|b| op.forward_unchecked(b)).collect();
            let input_gram = gram(&basis);
            let output_gram = gram(&images);
            // smallest generalized eigenvalue of (TᵀT, I) restricted to affine
            // functions, via Cholesky of the output Gram after whitening
            let ratio = min_gen_eigen(&output_gram, &input_gram);
            if !(ratio > 1e-12) {
                return Err(Error::Precondition(format!(
                    "channel {} operator ({}) vanishes on an affine function",
                    i + 1,
                    op.spec().kind_name()
                )));
            }
        }
        Ok(())
    }
}

fn gram(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    vs.iter()
        .map(|a| vs.iter().map(|b| crate::grid::dot(a, b)).collect())
        .collect()
}

/// Smallest λ with det(A − λB) = 0 for symmetric A ⪰ 0 and B ≻ 0, found by
/// bisection on the positive-definiteness of A − λB.
fn min_gen_eigen(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let is_pd = |lam: f64| -> bool {
        let m: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| a[i][j] - lam * b[i][j]).collect())
            .collect();
        cholesky_ok(&m)
    };
    let trace_ratio: f64 = (0..n).map(|i| a[i][i]).sum::<f64>() / (0..n).map(|i| b[i][i]).sum::<f64>().max(f64::MIN_POSITIVE);
    if !is_pd(0.0) {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, trace_ratio * n as f64 + 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if is_pd(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn cholesky_ok(m: &[Vec<f64>]) -> bool {
    let n = m.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = m[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return false;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    true
}
