use mdrecon::coupling::singular_values;
use mdrecon::discrepancy::{add_poisson_noise, eval_kl, eval_l2sq};
use mdrecon::forward::{ForwardOp, ForwardOpSpec};
use mdrecon::grid::sym_site_norm;
use mdrecon::rates::{phantom, PhantomKind};
use mdrecon::solver::{energy_parts, RegState};
use mdrecon::{
    solve, ChannelSpec, Coupling, Error, Grid, MultiImage, Problem, ProblemSpec, Regularizer, Solver, SolverConfig,
};

fn tgv(coupling: Coupling) -> Regularizer {
    Regularizer::Tgv {
        alpha0: 0.2,
        alpha1: 0.1,
        coupling,
    }
}

fn forward(spec: &ForwardOpSpec, grid: &Grid, u: &[f64]) -> Vec<f64> {
    ForwardOp::new(spec.clone(), grid).unwrap().forward_apply(u).unwrap()
}

/// Fourier (L2) channel plus Radon (KL) channel on a small disc phantom.
fn mixed_problem(size: usize, coupling: Coupling) -> Problem {
    let g = Grid::new(&[size, size]).unwrap();
    let truth = phantom(PhantomKind::SharedEdgesDisc, &g, 2);
    let fourier = ForwardOpSpec::MaskedFourier {
        mask: ForwardOpSpec::fourier_line_mask(&g, 0.5, 1),
    };
    let radon = ForwardOpSpec::radon_uniform(8, ForwardOpSpec::radon_default_bins(&g));
    let f0 = forward(&fourier, &g, &truth.channel(0));
    let clean = forward(&radon, &g, &truth.channel(1));
    let bg = vec![0.05; clean.len()];
    let shifted: Vec<f64> = clean.iter().zip(&bg).map(|(a, b)| a + b).collect();
    let f1 = add_poisson_noise(&shifted, 30.0, 9).unwrap().data;
    Problem::new(ProblemSpec {
        grid: g,
        channels: 2,
        regularizer: tgv(coupling),
        data: vec![ChannelSpec::l2(fourier, f0, 20.0), ChannelSpec::kl(radon, f1, 1.0, bg)],
    })
    .unwrap()
}

fn identity_problem(u: &MultiImage, regularizer: Regularizer, lambda: f64) -> Problem {
    let data = (0..u.channels())
        .map(|c| ChannelSpec::l2(ForwardOpSpec::Identity, u.channel(c), lambda))
        .collect();
    Problem::new(ProblemSpec {
        grid: u.grid().clone(),
        channels: u.channels(),
        regularizer,
        data,
    })
    .unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

#[test]
fn fixed_point_is_stationary() {
    let g = Grid::new(&[6, 5]).unwrap();
    let f: Vec<f64> = (0..30).map(|k| (k as f64 * 0.37).sin()).collect();
    let u = MultiImage::from_values(&g, 1, f).unwrap();
    let p = identity_problem(&u, Regularizer::Quadratic { weight: 0.4 }, 1.3);
    let config = SolverConfig {
        max_iters: 20_000,
        tol: 1e-15,
        patience: 5,
        ..SolverConfig::default()
    };
    let solver = Solver::new(&p, config).unwrap();
    let out = solver.run(solver.initial_state(None).unwrap()).unwrap();
    let mut state = out.state.clone();
    let change = solver.pd_step(&mut state).unwrap();
    assert!(change < 1e-12, "{change:e}");
    for (a, b) in state.r[0].iter().zip(&out.state.r[0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn iterates_stay_feasible_and_nonnegative() {
    for coupling in [Coupling::Frobenius, Coupling::Nuclear] {
        let p = mixed_problem(16, coupling);
        let solver = Solver::new(&p, SolverConfig::default()).unwrap();
        let scale = solver.channel_scales()[1];
        let kl_lambda = 1.0 / scale;
        let f = &p.data()[1].data;
        let mut state = solver.initial_state(None).unwrap();
        for _ in 0..150 {
            solver.pd_step(&mut state).unwrap();
            let RegState::Tgv { p: pd, q, .. } = &state.reg else {
                panic!("expected TGV state")
            };
            for site in 0..p.grid().sites() {
                let dual = match coupling {
                    Coupling::Frobenius => pd.block(site).frobenius(),
                    Coupling::Nuclear => singular_values(&pd.block(site))[0],
                };
                assert!(dual <= 0.1 + 1e-12, "p norm {dual}");
                assert!(sym_site_norm(q, site) <= 0.2 + 1e-12);
            }
            for (r, fk) in state.r[1].iter().zip(f) {
                if *fk > 0.0 {
                    assert!(*r < kl_lambda);
                }
            }
            assert!(state.u.channel(1).iter().all(|&x| x >= 0.0));
        }
    }
}

#[test]
fn energy_decreases_from_early_iterates() {
    let p = mixed_problem(16, Coupling::Nuclear);
    let config = SolverConfig {
        max_iters: 400,
        ..SolverConfig::default()
    };
    let out = solve(&p, config, None).unwrap();
    let d = &out.diagnostics;
    let at10 = d.iterations.iter().position(|&k| k == 10).unwrap();
    let last = *d.energy.last().unwrap();
    assert!(last <= d.energy[at10], "{last} > {}", d.energy[at10]);
    let direct = energy_parts(&p, out.u(), out.state.v()).unwrap().total;
    assert!((direct - last).abs() <= 1e-12 * direct.abs());
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let p = mixed_problem(16, Coupling::Nuclear);
    let config = SolverConfig {
        max_iters: 120,
        ..SolverConfig::default()
    };
    let a = solve(&p, config.clone(), None).unwrap();
    let b = solve(&p, config, None).unwrap();
    assert_eq!(a.diagnostics.to_csv(), b.diagnostics.to_csv());
    assert_eq!(a.state, b.state);
}

#[test]
fn tgv_reproduces_affine_images() {
    let g = Grid::new(&[12, 12]).unwrap();
    let mut u = MultiImage::zeros(&g, 2);
    for s in 0..g.sites() {
        let c = g.coords(s);
        let (x, y) = (c[0] as f64, c[1] as f64);
        u.set(s, 0, 0.3 + 0.05 * x - 0.02 * y);
        u.set(s, 1, 1.0 - 0.03 * x + 0.04 * y);
    }
    let p = identity_problem(&u, tgv(Coupling::Nuclear), 10.0);
    let config = SolverConfig {
        max_iters: 20_000,
        tol: 1e-12,
        record_every: 0,
        ..SolverConfig::default()
    };
    let out = solve(&p, config, None).unwrap();
    assert!(rel_err(out.u().values(), u.values()) < 1e-5);
    let parts = energy_parts(&p, out.u(), out.state.v()).unwrap();
    assert!(parts.regularizer < 1e-6, "{}", parts.regularizer);
}

#[test]
fn data_term_shrinks_as_lambda_grows() {
    let g = Grid::new(&[12, 12]).unwrap();
    let truth = phantom(PhantomKind::SharedEdgesDisc, &g, 1);
    // separable blur with frequency response bounded below, so each run
    // reaches its minimizer instead of stalling on near-null directions
    let k = [0.15, 0.7, 0.15];
    let kernel: Vec<f64> = (0..9).map(|i| k[i / 3] * k[i % 3]).collect();
    let conv = ForwardOpSpec::Convolution {
        kernel,
        kernel_dims: vec![3, 3],
    };
    let f = forward(&conv, &g, &truth.channel(0));
    let mut weighted = Vec::new();
    for lambda in [1e2, 1e4, 1e6] {
        let p = Problem::new(ProblemSpec {
            grid: g.clone(),
            channels: 1,
            regularizer: tgv(Coupling::Frobenius),
            data: vec![ChannelSpec::l2(conv.clone(), f.clone(), lambda)],
        })
        .unwrap();
        let config = SolverConfig {
            max_iters: 300_000,
            tol: 1e-10,
            record_every: 0,
            ..SolverConfig::default()
        };
        let out = solve(&p, config, None).unwrap();
        assert!(out.converged, "λ = {lambda}");
        let tu = forward(&conv, &g, &out.u().channel(0));
        weighted.push(lambda * eval_l2sq(&tu, &f));
    }
    assert!(weighted[1] <= weighted[0] && weighted[2] <= weighted[1], "{weighted:?}");
}

#[test]
fn huge_kl_weight_fits_the_data() {
    let g = Grid::new(&[8, 8]).unwrap();
    let truth = phantom(PhantomKind::SmoothBump, &g, 1);
    let f = truth.channel(0);
    let p = Problem::new(ProblemSpec {
        grid: g,
        channels: 1,
        regularizer: Regularizer::Quadratic { weight: 1.0 },
        data: vec![ChannelSpec::kl(ForwardOpSpec::Identity, f.clone(), 1e8, vec![])],
    })
    .unwrap();
    let config = SolverConfig {
        max_iters: 20_000,
        tol: 1e-12,
        ..SolverConfig::default()
    };
    let out = solve(&p, config, None).unwrap();
    let d = eval_kl(&out.u().channel(0), &f, None);
    assert!(d < 1e-6, "{d:e}");
}

#[test]
fn tgv_rejects_operators_that_kill_affine_fields() {
    let g = Grid::new(&[8, 8]).unwrap();
    let zero = ForwardOpSpec::Convolution {
        kernel: vec![0.0],
        kernel_dims: vec![1, 1],
    };
    let p = Problem::new(ProblemSpec {
        grid: g,
        channels: 1,
        regularizer: tgv(Coupling::Frobenius),
        data: vec![ChannelSpec::l2(zero, vec![0.0; 64], 1.0)],
    })
    .unwrap();
    assert!(matches!(
        Solver::new(&p, SolverConfig::default()),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn wavelet_denoising_reduces_error() {
    let g = Grid::new(&[16, 16]).unwrap();
    let truth = phantom(PhantomKind::SharedEdgesDisc, &g, 2);
    let mut noisy = truth.clone();
    for (k, v) in noisy.values_mut().iter_mut().enumerate() {
        *v += 0.1 * ((k as f64 * 12.9898).sin() * 43758.5453).fract();
    }
    let p = identity_problem(&noisy, Regularizer::WaveletL21 { levels: 2, alpha: 0.05 }, 1.0);
    let out = solve(&p, SolverConfig::default(), None).unwrap();
    assert!(out.converged);
    let before = rel_err(noisy.values(), truth.values());
    let after = rel_err(out.u().values(), truth.values());
    assert!(after < before, "{after} vs {before}");
    let e = &out.diagnostics.energy;
    assert!(e.last().unwrap() <= &e[10]);
}

#[test]
fn warm_start_reaches_the_same_minimizer() {
    let g = Grid::new(&[6, 6]).unwrap();
    let f: Vec<f64> = (0..36).map(|k| 1.0 + (k as f64 * 0.7).cos()).collect();
    let u = MultiImage::from_values(&g, 1, f).unwrap();
    let p = identity_problem(&u, Regularizer::Quadratic { weight: 0.5 }, 2.0);
    let cold_again = || SolverConfig {
        max_iters: 20_000,
        tol: 1e-13,
        ..SolverConfig::default()
    };
    let cold = cold_again();
    let warm = SolverConfig {
        warm_start: true,
        ..cold.clone()
    };
    let a = solve(&p, cold, None).unwrap();
    let b = solve(&p, warm, None).unwrap();
    assert!(rel_err(a.u().values(), b.u().values()) < 1e-10);
    let c = solve(&p, cold_again(), Some(a.u())).unwrap();
    assert!(rel_err(c.u().values(), a.u().values()) < 1e-10);
}
