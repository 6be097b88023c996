//! Per-channel forward operators and their adjoints.
//!
//! Every operator maps one channel of the grid (a flat vector of `sites`
//! reals) to a flat real data vector. Complex Fourier data is stored as
//! interleaved (re, im) pairs so the solver stays in real arithmetic.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::diffops::LinearOp;
use crate::error::{shape_err, Error, Result};
use crate::grid::Grid;

/// Sample spacing along a Radon ray, in pixels.
pub const RADON_STEP: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub enum ForwardOpSpec {
    Identity,
    /// Same-size correlation with zero padding; the kernel is centered at
    /// `kernel_dims[k] / 2` on each axis.
    Convolution {
        kernel: Vec<f64>,
        kernel_dims: Vec<usize>,
    },
    /// Unitary DFT restricted to the frequencies where `mask` is set, in site
    /// order.
    MaskedFourier { mask: Vec<bool> },
    /// Parallel-beam line integrals (2D only); detector bins are one pixel
    /// wide and centered on the image center.
    Radon { angles: Vec<f64>, bins: usize },
}

impl ForwardOpSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ForwardOpSpec::Identity => "identity",
            ForwardOpSpec::Convolution { .. } => "convolution",
            ForwardOpSpec::MaskedFourier { .. } => "fourier",
            ForwardOpSpec::Radon { .. } => "radon",
        }
    }

    /// Evenly spaced angles in [0, π).
    pub fn radon_uniform(n_angles: usize, bins: usize) -> Self {
        let angles = (0..n_angles)
            .map(|k| std::f64::consts::PI * k as f64 / n_angles as f64)
            .collect();
        ForwardOpSpec::Radon { angles, bins }
    }

    /// Fourier sampling of whole lines along axis 0 covering about `fraction`
    /// of k-space: a fully sampled low-frequency band (at least the lines
    /// 0, ±1) plus randomly chosen lines, reproducible from `seed`.
    pub fn fourier_line_mask(grid: &Grid, fraction: f64, seed: u64) -> Vec<bool> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n0 = grid.dims()[0];
        let total = ((fraction.clamp(0.0, 1.0) * n0 as f64).round() as usize).clamp(1, n0);
        let half_band = (total / 6).max(1);
        let mut lines = vec![false; n0];
        for k in 0..=half_band {
            lines[k % n0] = true;
            lines[(n0 - k) % n0] = true;
        }
        let mut rest: Vec<usize> = (0..n0).filter(|&k| !lines[k]).collect();
        rest.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let have = lines.iter().filter(|&&b| b).count();
        for &k in rest.iter().take(total.saturating_sub(have)) {
            lines[k] = true;
        }
        let inner: usize = grid.dims()[1..].iter().product();
        (0..grid.sites()).map(|s| lines[s / inner]).collect()
    }

    /// Detector bins needed to cover the image diagonal.
    pub fn radon_default_bins(grid: &Grid) -> usize {
        let dims = grid.dims();
        let diag = ((dims[0] * dims[0] + dims.get(1).map_or(0, |n| n * n)) as f64).sqrt();
        diag.ceil() as usize + 2
    }
}

struct FourierPlan {
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
    sampled: Vec<usize>,
}

struct RadonGeometry {
    /// (cos θ, sin θ) per angle
    dirs: Vec<(f64, f64)>,
    bins: usize,
    samples: usize,
    /// Per (angle, site) factor that rescales each pixel's footprint so that
    /// its taps within one angle sum to one.
    footprint_scale: Vec<f64>,
}

enum Kind {
    Identity,
    Convolution {
        kernel: Vec<f64>,
        /// site-offset of each kernel tap, per axis
        offsets: Vec<[isize; 3]>,
    },
    Fourier(FourierPlan),
    Radon(RadonGeometry),
}

/// A forward operator bound to its domain grid.
pub struct ForwardOp {
    spec: ForwardOpSpec,
    grid: Grid,
    kind: Kind,
    codomain: usize,
}

impl std::fmt::Debug for ForwardOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardOp")
            .field("kind", &self.spec.kind_name())
            .field("dims", &self.grid.dims())
            .field("codomain", &self.codomain)
            .finish()
    }
}

impl ForwardOp {
    pub fn new(spec: ForwardOpSpec, grid: &Grid) -> Result<Self> {
        let sites = grid.sites();
        let (kind, codomain) = match &spec {
            ForwardOpSpec::Identity => (Kind::Identity, sites),
            ForwardOpSpec::Convolution { kernel, kernel_dims } => {
                if kernel_dims.len() != grid.ndim() {
                    return shape_err(format!(
                        "kernel has {} axes, grid has {}",
                        kernel_dims.len(),
                        grid.ndim()
                    ));
                }
                if kernel_dims.iter().product::<usize>() != kernel.len() || kernel.is_empty() {
                    return shape_err(format!(
                        "kernel dims {kernel_dims:?} do not match {} taps",
                        kernel.len()
                    ));
                }
                if kernel.iter().any(|k| !k.is_finite()) {
                    return Err(Error::NonFinite("convolution kernel".into()));
                }
                let kg = Grid::new(kernel_dims)?;
                let offsets = (0..kernel.len())
                    .map(|t| {
                        let c = kg.coords(t);
                        let mut o = [0isize; 3];
                        for k in 0..kernel_dims.len() {
                            o[k] = c[k] as isize - (kernel_dims[k] / 2) as isize;
                        }
                        o
                    })
                    .collect();
                (
                    Kind::Convolution {
                        kernel: kernel.clone(),
                        offsets,
                    },
                    sites,
                )
            }
            ForwardOpSpec::MaskedFourier { mask } => {
                if mask.len() != sites {
                    return shape_err(format!("mask has {} entries, grid has {sites}", mask.len()));
                }
                let mut planner = FftPlanner::new();
                let forward = grid.dims().iter().map(|&n| planner.plan_fft_forward(n)).collect();
                let inverse = grid.dims().iter().map(|&n| planner.plan_fft_inverse(n)).collect();
                let sampled: Vec<usize> = (0..sites).filter(|&s| mask[s]).collect();
                let codomain = 2 * sampled.len();
                (
                    Kind::Fourier(FourierPlan {
                        forward,
                        inverse,
                        sampled,
                    }),
                    codomain,
                )
            }
            ForwardOpSpec::Radon { angles, bins } => {
                if grid.ndim() != 2 {
                    return Err(Error::InvalidArgument("Radon transform needs a 2D grid".into()));
                }
                if angles.is_empty() || *bins == 0 {
                    return Err(Error::InvalidArgument("Radon needs ≥ 1 angle and ≥ 1 bin".into()));
                }
                if let Some(a) = angles
                    .iter()
                    .find(|a| !(a.is_finite() && **a >= 0.0 && **a < std::f64::consts::PI))
                {
                    return Err(Error::InvalidArgument(format!("Radon angle {a} outside [0, π)")));
                }
                let dims = grid.dims();
                let half_diag = 0.5 * ((dims[0] * dims[0] + dims[1] * dims[1]) as f64).sqrt() + 1.0;
                let half_count = (half_diag / RADON_STEP).ceil() as usize;
                let mut geom = RadonGeometry {
                    dirs: angles.iter().map(|a| (a.cos(), a.sin())).collect(),
                    bins: *bins,
                    samples: 2 * half_count + 1,
                    footprint_scale: Vec::new(),
                };
                geom.footprint_scale = footprint_scales(grid, &geom);
                let codomain = angles.len() * bins;
                (Kind::Radon(geom), codomain)
            }
        };
        Ok(Self {
            spec,
            grid: grid.clone(),
            kind,
            codomain,
        })
    }

    pub fn spec(&self) -> &ForwardOpSpec {
        &self.spec
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn codomain_len(&self) -> usize {
        self.codomain
    }

    /// Shape of the data vector for file export: (angles, bins) for Radon,
    /// (values) otherwise.
    pub fn codomain_dims(&self) -> Vec<usize> {
        match &self.kind {
            Kind::Radon(g) => vec![g.dirs.len(), g.bins],
            _ => vec![self.codomain],
        }
    }

    pub fn forward_apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.grid.sites() {
            return shape_err(format!(
                "operator domain has {} sites, got {}",
                self.grid.sites(),
                u.len()
            ));
        }
        Ok(self.forward_unchecked(u))
    }

    pub fn adjoint_apply(&self, data: &[f64]) -> Result<Vec<f64>> {
        if data.len() != self.codomain {
            return shape_err(format!(
                "operator codomain has {} entries, got {}",
                self.codomain,
                data.len()
            ));
        }
        Ok(self.adjoint_unchecked(data))
    }

    pub(crate) fn forward_unchecked(&self, u: &[f64]) -> Vec<f64> {
        match &self.kind {
            Kind::Identity => u.to_vec(),
            Kind::Convolution { kernel, offsets } => self.correlate(u, kernel, offsets),
            Kind::Fourier(plan) => {
                let mut buf: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
                self.fft_nd(&mut buf, &plan.forward);
                let mut out = Vec::with_capacity(self.codomain);
                for &s in &plan.sampled {
                    out.push(buf[s].re);
                    out.push(buf[s].im);
                }
                out
            }
            Kind::Radon(geom) => self.radon_forward(u, geom),
        }
    }

    pub(crate) fn adjoint_unchecked(&self, data: &[f64]) -> Vec<f64> {
        match &self.kind {
            Kind::Identity => data.to_vec(),
            Kind::Convolution { kernel, offsets } => self.correlate_adjoint(data, kernel, offsets),
            Kind::Fourier(plan) => {
                let mut buf = vec![Complex64::new(0.0, 0.0); self.grid.sites()];
                for (k, &s) in plan.sampled.iter().enumerate() {
                    buf[s] = Complex64::new(data[2 * k], data[2 * k + 1]);
                }
                self.fft_nd(&mut buf, &plan.inverse);
                buf.iter().map(|z| z.re).collect()
            }
            Kind::Radon(geom) => self.radon_adjoint(data, geom),
        }
    }

    fn shifted_site(&self, site: usize, off: &[isize; 3]) -> Option<usize> {
        let dims = self.grid.dims();
        let x = self.grid.coords(site);
        let mut idx = 0usize;
        for k in 0..dims.len() {
            let y = x[k] as isize + off[k];
            if y < 0 || y >= dims[k] as isize {
                return None;
            }
            idx = idx * dims[k] + y as usize;
        }
        Some(idx)
    }

    fn correlate(&self, u: &[f64], kernel: &[f64], offsets: &[[isize; 3]]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        for (s, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (w, off) in kernel.iter().zip(offsets) {
                if let Some(t) = self.shifted_site(s, off) {
                    acc += w * u[t];
                }
            }
            *o = acc;
        }
        out
    }

    fn correlate_adjoint(&self, y: &[f64], kernel: &[f64], offsets: &[[isize; 3]]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        for (s, &ys) in y.iter().enumerate() {
            for (w, off) in kernel.iter().zip(offsets) {
                if let Some(t) = self.shifted_site(s, off) {
                    out[t] += w * ys;
                }
            }
        }
        out
    }

    /// In-place separable DFT with unitary scaling.
    fn fft_nd(&self, buf: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>]) {
        let dims = self.grid.dims();
        let strides = self.grid.strides();
        let total = buf.len();
        let mut line = Vec::new();
        for (axis, plan) in plans.iter().enumerate() {
            let n = dims[axis];
            if n == 1 {
                continue;
            }
            let stride = strides[axis];
            line.resize(n, Complex64::new(0.0, 0.0));
            let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
            // line starts: all sites with coordinate 0 along `axis`
            for start in (0..total).filter(|&s| (s / stride).is_multiple_of(n)) {
                for (i, l) in line.iter_mut().enumerate() {
                    *l = buf[start + i * stride];
                }
                plan.process_with_scratch(&mut line, &mut scratch);
                for (i, l) in line.iter().enumerate() {
                    buf[start + i * stride] = *l;
                }
            }
        }
        let scale = 1.0 / (total as f64).sqrt();
        buf.iter_mut().for_each(|z| *z *= scale);
    }

    fn ray_taps(&self, geom: &RadonGeometry, angle: usize, bin: usize, mut f: impl FnMut(usize, f64)) {
        let scale = &geom.footprint_scale[angle * self.grid.sites()..(angle + 1) * self.grid.sites()];
        raw_ray_taps(&self.grid, geom, angle, bin, |site, w| f(site, w * scale[site]));
    }

    fn radon_forward(&self, u: &[f64], geom: &RadonGeometry) -> Vec<f64> {
        let bins = geom.bins;
        (0..geom.dirs.len() * bins)
            .into_par_iter()
            .map(|ray| {
                let mut acc = 0.0;
                self.ray_taps(geom, ray / bins, ray % bins, |site, w| acc += w * u[site]);
                acc
            })
            .collect()
    }

    fn radon_adjoint(&self, data: &[f64], geom: &RadonGeometry) -> Vec<f64> {
        let bins = geom.bins;
        let sites = self.grid.sites();
        // one partial image per angle, reduced in angle order so the result
        // does not depend on the thread count
        let partials: Vec<Vec<f64>> = (0..geom.dirs.len())
            .into_par_iter()
            .map(|a| {
                let mut img = vec![0.0; sites];
                for b in 0..bins {
                    let y = data[a * bins + b];
                    if y != 0.0 {
                        self.ray_taps(geom, a, b, |site, w| img[site] += w * y);
                    }
                }
                img
            })
            .collect();
        let mut out = vec![0.0; sites];
        for p in &partials {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        out
    }
}

/// Bilinear taps of the sample points of one ray; `f` receives
/// (site, weight) with the step length folded into the weight.
fn raw_ray_taps(grid: &Grid, geom: &RadonGeometry, angle: usize, bin: usize, mut f: impl FnMut(usize, f64)) {
    let dims = grid.dims();
    let (rows, cols) = (dims[0], dims[1]);
    let c_row = 0.5 * (rows as f64 - 1.0);
    let c_col = 0.5 * (cols as f64 - 1.0);
    let (ct, st) = geom.dirs[angle];
    let s = bin as f64 - 0.5 * (geom.bins as f64 - 1.0);
    let half = (geom.samples / 2) as f64;
    for k in 0..geom.samples {
        let t = (k as f64 - half) * RADON_STEP;
        // x along columns, y along rows
        let x = s * ct - t * st;
        let y = s * st + t * ct;
        let r = y + c_row;
        let q = x + c_col;
        let r0 = r.floor();
        let q0 = q.floor();
        let fr = r - r0;
        let fq = q - q0;
        let (r0, q0) = (r0 as isize, q0 as isize);
        for (dr, wr) in [(0isize, 1.0 - fr), (1, fr)] {
            let ri = r0 + dr;
            if ri < 0 || ri >= rows as isize || wr == 0.0 {
                continue;
            }
            for (dq, wq) in [(0isize, 1.0 - fq), (1, fq)] {
                let qi = q0 + dq;
                if qi < 0 || qi >= cols as isize || wq == 0.0 {
                    continue;
                }
                f(ri as usize * cols + qi as usize, wr * wq * RADON_STEP);
            }
        }
    }
}

/// Sampled line sums do not conserve mass exactly at oblique angles; dividing
/// each pixel by its per-angle tap sum restores it. Pixels the detector only
/// partly covers (tap sum below 1/2) are left unscaled.
fn footprint_scales(grid: &Grid, geom: &RadonGeometry) -> Vec<f64> {
    let sites = grid.sites();
    (0..geom.dirs.len())
        .into_par_iter()
        .flat_map_iter(|a| {
            let mut sum = vec![0.0; sites];
            for b in 0..geom.bins {
                raw_ray_taps(grid, geom, a, b, |site, w| sum[site] += w);
            }
            sum.into_iter().map(|t| if t >= 0.5 { 1.0 / t } else { 1.0 })
        })
        .collect()
}

impl LinearOp for ForwardOp {
    fn domain_len(&self) -> usize {
        self.grid.sites()
    }
    fn codomain_len(&self) -> usize {
        self.codomain
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.forward_unchecked(x)
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.adjoint_unchecked(y)
    }
}
