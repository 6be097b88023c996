//! Data discrepancies, the proximal maps of their convex conjugates, the
//! nonnegativity projection, and noise generation.
//!
//! Noise streams: every call seeds one `ChaCha8Rng` from its `seed` and draws
//! one variate per data entry in index order, so a realization depends only on
//! (seed, clean data) and never on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::MultiImage;

/// Largest admissible Poisson mean per entry.
pub const MAX_POISSON_MEAN: f64 = 1e15;

/// Σ (v_k − f_k)².
pub fn eval_l2sq(v: &[f64], f: &[f64]) -> f64 {
    debug_assert_eq!(v.len(), f.len());
    v.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Pointwise Kullback-Leibler integrand v − f − f log(v/f) with
/// 0·log(a/0) = 0 and −b·log(0/b) = ∞ for b > 0; ∞ for negative arguments.
#[inline]
pub fn kl_term(v: f64, f: f64) -> f64 {
    if v < 0.0 || f < 0.0 || v.is_nan() || f.is_nan() {
        return f64::INFINITY;
    }
    if f == 0.0 {
        return v;
    }
    if v == 0.0 {
        return f64::INFINITY;
    }
    // f·(r − 1 − log r) with r = v/f, written to stay accurate near r = 1
    let r = v / f;
    let t = (r - 1.0) - (r - 1.0).ln_1p();
    (f * t).max(0.0)
}

/// Σ μ_k (v_k − f_k − f_k log(v_k/f_k)); `weights = None` means μ ≡ 1.
pub fn eval_kl(v: &[f64], f: &[f64], weights: Option<&[f64]>) -> f64 {
    debug_assert_eq!(v.len(), f.len());
    let mut acc = 0.0;
    for k in 0..v.len() {
        let mu = weights.map_or(1.0, |w| w[k]);
        let t = kl_term(v[k], f[k]);
        if t.is_infinite() {
            return f64::INFINITY;
        }
        acc += mu * t;
    }
    acc
}

/// Dual prox of the squared-norm discrepancy: elementwise `x / (1 + σ/λ)`.
///
/// `shifted` is r + σ T ū − σ f. The weight here is the one of the conjugate
/// ‖r‖²/(2λ), i.e. of the primal term (λ/2)‖·‖²; a primal term λ‖·‖² is
/// handled by passing 2λ. `lambda = ∞` gives the identity (hard constraint).
pub fn prox_l2_dual(shifted: &[f64], sigma: f64, lambda: f64) -> Vec<f64> {
    let mut out = shifted.to_vec();
    prox_l2_dual_in_place(&mut out, sigma, lambda);
    out
}

pub fn prox_l2_dual_in_place(r: &mut [f64], sigma: f64, lambda: f64) {
    let factor = 1.0 / (1.0 + sigma / lambda);
    r.iter_mut().for_each(|x| *x *= factor);
}

/// Scalar dual prox of λ·KL(·, f):
/// r − (r − λ + √((r − λ)² + 4σλf)) / 2, evaluated without cancellation.
#[inline]
pub fn prox_kl_dual_scalar(rhat: f64, f: f64, sigma: f64, lambda: f64) -> f64 {
    if lambda.is_infinite() {
        return rhat - sigma * f;
    }
    let a = lambda - rhat;
    let s = (a * a + 4.0 * sigma * lambda * f).sqrt();
    if a > 0.0 {
        rhat - 2.0 * sigma * lambda * f / (a + s)
    } else {
        0.5 * (rhat + lambda - s)
    }
}

/// Dual prox of λ·KL(· + c, f); `rhat` is r + σ T ū + σ c.
pub fn prox_kl_dual(rhat: &[f64], f: &[f64], sigma: f64, lambda: f64) -> Vec<f64> {
    let mut out = rhat.to_vec();
    prox_kl_dual_in_place(&mut out, f, sigma, lambda);
    out
}

pub fn prox_kl_dual_in_place(r: &mut [f64], f: &[f64], sigma: f64, lambda: f64) {
    for (x, &fk) in r.iter_mut().zip(f) {
        *x = prox_kl_dual_scalar(*x, fk, sigma, lambda);
    }
}

/// Clamp the listed channels at zero; other channels are untouched.
pub fn project_nonneg(u: &MultiImage, kl_channels: &[usize]) -> MultiImage {
    let mut out = u.clone();
    project_nonneg_in_place(&mut out, kl_channels);
    out
}

pub fn project_nonneg_in_place(u: &mut MultiImage, kl_channels: &[usize]) {
    let n = u.channels();
    if kl_channels.is_empty() {
        return;
    }
    for chunk in u.values_mut().chunks_exact_mut(n) {
        for &c in kl_channels {
            if chunk[c] < 0.0 {
                chunk[c] = 0.0;
            }
        }
    }
}

/// Noisy data with its realized noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRealization {
    pub data: Vec<f64>,
    /// ‖f − f†‖₂ for Gaussian noise, KL(f†, f) for Poisson noise.
    pub delta: f64,
    pub seed: u64,
}

/// Gaussian noise rescaled so that ‖f − f†‖₂ equals `target_delta`.
pub fn add_gaussian_noise(clean: &[f64], target_delta: f64, seed: u64) -> Result<NoiseRealization> {
    if !(target_delta >= 0.0 && target_delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise level {target_delta}")));
    }
    if target_delta == 0.0 || clean.is_empty() {
        return Ok(NoiseRealization {
            data: clean.to_vec(),
            delta: 0.0,
            seed,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..clean.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let nrm = noise.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = target_delta / nrm;
    let data: Vec<f64> = clean.iter().zip(&noise).map(|(c, n)| c + scale * n).collect();
    let delta = eval_l2sq(&data, clean).sqrt();
    Ok(NoiseRealization { data, delta, seed })
}

/// f = Poisson(s·f†)/s elementwise; the realized level is KL(f†, f).
pub fn add_poisson_noise(clean: &[f64], count_scale: f64, seed: u64) -> Result<NoiseRealization> {
    if !(count_scale > 0.0 && count_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("count scale {count_scale}")));
    }
    if let Some(bad) = clean.iter().find(|x| !(**x >= 0.0 && x.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "Poisson noise needs nonnegative clean data, found {bad}"
        )));
    }
    let peak = clean.iter().fold(0.0f64, |m, &x| m.max(x)) * count_scale;
    if peak > MAX_POISSON_MEAN {
        return Err(Error::InvalidArgument(format!(
            "Poisson mean {peak:e} exceeds the count range"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(clean.len());
    for &c in clean {
        let mean = c * count_scale;
        if mean > 0.0 {
            let dist = Poisson::new(mean)
                .map_err(|e| Error::InvalidArgument(format!("Poisson mean {mean}: {e}")))?;
            let k: f64 = dist.sample(&mut rng);
            data.push(k / count_scale);
        } else {
            data.push(0.0);
        }
    }
    let delta = eval_kl(clean, &data, None);
    Ok(NoiseRealization { data, delta, seed })
}
