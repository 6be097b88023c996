use mdrecon::discrepancy::{eval_kl, prox_kl_dual, prox_kl_dual_scalar, prox_l2_dual};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Golden-section minimization over [lo, hi]. `cmp(a, b)` returns g(a) − g(b),
/// computed without forming g itself so the comparison keeps full precision
/// near the minimizer.
fn golden_min(mut lo: f64, mut hi: f64, cmp: impl Fn(f64, f64) -> f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - phi * (hi - lo);
    let mut b = lo + phi * (hi - lo);
    while hi - lo > 1e-13 * (1.0 + lo.abs().max(hi.abs())) {
        if cmp(a, b) < 0.0 {
            hi = b;
            b = a;
            a = hi - phi * (hi - lo);
        } else {
            lo = a;
            a = b;
            b = lo + phi * (hi - lo);
        }
        if !(a < b) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// argmin_t (t − x)²/2 + σ·F*(t) with F*(t) = −λ f log(1 − t/λ) (f > 0) or
/// the indicator of t ≤ λ (f = 0).
fn kl_dual_prox_oracle(x: f64, f: f64, sigma: f64, lambda: f64) -> f64 {
    let top = x.min(lambda);
    if f == 0.0 {
        return top;
    }
    let lo = top - (sigma * lambda * f).sqrt() - 1.0;
    golden_min(lo, top, |a, b| {
        0.5 * (a - b) * (a + b - 2.0 * x) - sigma * lambda * f * ((b - a) / (lambda - b)).ln_1p()
    })
}

/// argmin_t (t − x)²/2 + σ t²/(2λ).
fn l2_dual_prox_oracle(x: f64, sigma: f64, lambda: f64) -> f64 {
    let r = x.abs() + 1.0;
    golden_min(-r, r, |a, b| 0.5 * (a - b) * (a + b - 2.0 * x) + sigma * (a - b) * (a + b) / (2.0 * lambda))
}

fn random_params(rng: &mut ChaCha8Rng) -> (f64, f64, f64, f64) {
    let x = rng.random_range(-5.0..5.0);
    let f = if rng.random_bool(0.1) { 0.0 } else { 10f64.powf(rng.random_range(-2.0..1.0)) };
    let sigma = 10f64.powf(rng.random_range(-2.0..1.0));
    let lambda = 10f64.powf(rng.random_range(-1.0..2.0));
    (x, f, sigma, lambda)
}

#[test]
fn kl_dual_prox_matches_scalar_minimization() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let (x, f, sigma, lambda) = random_params(&mut rng);
        let got = prox_kl_dual_scalar(x, f, sigma, lambda);
        let want = kl_dual_prox_oracle(x, f, sigma, lambda);
        assert!((got - want).abs() < 1e-8, "x={x} f={f} σ={sigma} λ={lambda}: {got} vs {want}");
        if f > 0.0 {
            assert!(got < lambda);
        }
    }
}

#[test]
fn kl_dual_prox_moreau_identity() {
    // prox_{σF*}(x) = x − σ·prox_{F/σ}(x/σ), with the primal prox of
    // (λ/σ)·KL(·, f) in closed form
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let (x, f, sigma, lambda) = random_params(&mut rng);
        let y = x / sigma;
        let k = lambda / sigma;
        let primal = 0.5 * ((y - k) + ((y - k).powi(2) + 4.0 * k * f).sqrt());
        let want = x - sigma * primal;
        let got = prox_kl_dual_scalar(x, f, sigma, lambda);
        assert!((got - want).abs() < 1e-9 * (1.0 + want.abs()), "{got} vs {want}");
    }
}

#[test]
fn l2_dual_prox_matches_scalar_minimization() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let (x, _, sigma, lambda) = random_params(&mut rng);
        let got = prox_l2_dual(&[x], sigma, lambda)[0];
        let want = l2_dual_prox_oracle(x, sigma, lambda);
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        // Moreau: x − σ·prox_{(λ/2σ)|·|²}(x/σ)
        let moreau = x - sigma * (x / sigma) / (1.0 + lambda / sigma);
        assert!((got - moreau).abs() < 1e-10 * (1.0 + x.abs()));
    }
}

#[test]
fn dual_proxes_are_nonexpansive() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let n = 8;
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let sigma = rng.random_range(0.01..3.0);
        let lambda = rng.random_range(0.1..20.0);
        let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let d_in = dist(&a, &b);
        let (ka, kb) = (prox_kl_dual(&a, &f, sigma, lambda), prox_kl_dual(&b, &f, sigma, lambda));
        assert!(dist(&ka, &kb) <= d_in * (1.0 + 1e-12));
        let (la, lb) = (prox_l2_dual(&a, sigma, lambda), prox_l2_dual(&b, sigma, lambda));
        assert!(dist(&la, &lb) <= d_in * (1.0 + 1e-12));
        for k in 0..n {
            assert!((ka[k] - kb[k]).abs() <= (a[k] - b[k]).abs() * (1.0 + 1e-12) + 1e-15);
        }
    }
}

fn random_pair(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let f: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.0..5.0) })
        .collect();
    // v > 0 wherever f > 0 keeps KL finite
    let v: Vec<f64> = f
        .iter()
        .map(|&fk| {
            if fk > 0.0 || rng.random_bool(0.5) {
                fk * rng.random_range(0.05..4.0) + rng.random_range(1e-3..0.5)
            } else {
                0.0
            }
        })
        .collect();
    (v, f)
}

#[test]
fn l1_kl_inequality() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let (v, f) = random_pair(&mut rng, n);
        let kl = eval_kl(&v, &f, None);
        assert!(kl.is_finite() && kl >= 0.0);
        let l1 = |x: &[f64]| x.iter().map(|a| a.abs()).sum::<f64>();
        let diff: f64 = v.iter().zip(&f).map(|(a, b)| (a - b).abs()).sum();
        let rhs = (2.0 / 3.0 * l1(&f) + 4.0 / 3.0 * l1(&v)) * kl;
        if diff * diff > rhs * (1.0 + 1e-12) {
            violations += 1;
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn kl_continuity_in_the_data() {
    // D(v, fⁿ) − D(v, f) = Σ(f − fⁿ)·log(v/f) + D(f, fⁿ), then the L1–KL
    // inequality bounds ‖f − fⁿ‖₁ by D(f, fⁿ)^{1/2}
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..500 {
        let n = rng.random_range(1..30);
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
        let fn_: Vec<f64> = f.iter().map(|x| x * rng.random_range(0.5..1.5)).collect();
        let (b1, b0) = (0.5, 2.0);
        let v: Vec<f64> = f.iter().map(|x| x * rng.random_range(b1..b0)).collect();
        let log_sup = v.iter().zip(&f).map(|(a, b)| (a / b).ln().abs()).fold(0.0, f64::max);
        let d_noise = eval_kl(&f, &fn_, None);
        let l1 = |x: &[f64]| x.iter().sum::<f64>();
        let c = log_sup * ((2.0 / 3.0 * l1(&fn_) + 4.0 / 3.0 * l1(&f)) * d_noise).sqrt();
        let lhs = (eval_kl(&v, &fn_, None) - eval_kl(&v, &f, None)).abs();
        assert!(lhs <= c + d_noise + 1e-10 * (1.0 + lhs), "{lhs} > {c} + {d_noise}");
    }
}

#[test]
fn kl_vanishes_only_on_equal_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let (v, f) = random_pair(&mut rng, 10);
        assert!(eval_kl(&f, &f, None).abs() < 1e-12);
        if v.iter().zip(&f).any(|(a, b)| (a - b).abs() > 1e-6) {
            assert!(eval_kl(&v, &f, None) > 0.0);
        }
    }
}
