use mdrecon::diffops::{adjoint_check, grad, op_norm_estimate, GradOp, LinearOp, SymGradOp};
use mdrecon::forward::{ForwardOp, ForwardOpSpec};
use mdrecon::rates::{phantom, PhantomKind};
use mdrecon::{Grid, MultiImage};
use nalgebra::{DMatrix, SymmetricEigen};

fn dense(op: &dyn LinearOp) -> DMatrix<f64> {
    let (m, n) = (op.codomain_len(), op.domain_len());
    let mut a = DMatrix::zeros(m, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        for (i, v) in op.apply(&e).into_iter().enumerate() {
            a[(i, j)] = v;
        }
    }
    a
}

fn largest_singular_value(a: &DMatrix<f64>) -> f64 {
    let ata = a.transpose() * a;
    SymmetricEigen::new(ata).eigenvalues.iter().copied().fold(0.0, f64::max).sqrt()
}

#[test]
fn grad_norm_matches_dense_oracle() {
    for n in [2usize, 5, 8, 16] {
        let op = GradOp {
            grid: Grid::new(&[n]).unwrap(),
            channels: 1,
        };
        let exact = largest_singular_value(&dense(&op));
        let formula = 2.0 * (std::f64::consts::PI * (n - 1) as f64 / (2.0 * n as f64)).sin();
        assert!((exact - formula).abs() < 1e-10, "n={n}: {exact} vs {formula}");
        let est = op_norm_estimate(&op, 2000, 1);
        assert!(est <= exact + 1e-6);
        assert!(est > exact - 1e-3, "n={n}: {est} vs {exact}");
    }
}

#[test]
fn norm_estimates_never_exceed_dense_value() {
    let g = Grid::new(&[5, 4]).unwrap();
    let ops: Vec<Box<dyn LinearOp>> = vec![
        Box::new(GradOp {
            grid: g.clone(),
            channels: 2,
        }),
        Box::new(SymGradOp {
            grid: g.clone(),
            channels: 1,
        }),
        Box::new(ForwardOp::new(ForwardOpSpec::radon_uniform(6, 9), &g).unwrap()),
    ];
    for (k, op) in ops.iter().enumerate() {
        // SymGradOp has a weighted codomain; its dense matrix is taken in
        // the isometric coordinates (√w · entries)
        let mut a = dense(op.as_ref());
        if k == 1 {
            let w = mdrecon::grid::sym_weights(2);
            for i in 0..a.nrows() {
                let s = w[i % w.len()].sqrt();
                a.row_mut(i).scale_mut(s);
            }
        }
        let exact = largest_singular_value(&a);
        let mut last = 0.0;
        for iters in [1, 5, 20, 100] {
            let est = op_norm_estimate(op.as_ref(), iters, 7);
            assert!(est <= exact + 1e-6, "op {k}: {est} > {exact}");
            assert!(est >= last - 1e-12, "op {k}: not monotone");
            last = est;
        }
    }
}

#[test]
fn all_adjoint_pairs_on_64x64() {
    let start = std::time::Instant::now();
    let g = Grid::new(&[64, 64]).unwrap();
    let mut kernel = vec![0.0; 9];
    for (k, v) in kernel.iter_mut().enumerate() {
        *v = 1.0 + k as f64 * 0.3;
    }
    let ops: Vec<(&str, Box<dyn LinearOp>)> = vec![
        (
            "grad",
            Box::new(GradOp {
                grid: g.clone(),
                channels: 2,
            }),
        ),
        (
            "sym_grad",
            Box::new(SymGradOp {
                grid: g.clone(),
                channels: 2,
            }),
        ),
        (
            "convolution",
            Box::new(
                ForwardOp::new(
                    ForwardOpSpec::Convolution {
                        kernel,
                        kernel_dims: vec![3, 3],
                    },
                    &g,
                )
                .unwrap(),
            ),
        ),
        (
            "fourier",
            Box::new(
                ForwardOp::new(
                    ForwardOpSpec::MaskedFourier {
                        mask: ForwardOpSpec::fourier_line_mask(&g, 0.25, 3),
                    },
                    &g,
                )
                .unwrap(),
            ),
        ),
        (
            "radon",
            Box::new(
                ForwardOp::new(ForwardOpSpec::radon_uniform(45, ForwardOpSpec::radon_default_bins(&g)), &g).unwrap(),
            ),
        ),
    ];
    for (name, op) in &ops {
        let err = adjoint_check(op.as_ref(), 10, 2024);
        assert!(err < 1e-10, "{name}: {err:e}");
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn radon_conserves_mass_per_angle() {
    for n in [32usize, 48, 64] {
        let g = Grid::new(&[n, n]).unwrap();
        let c0 = (n as f64 - 1.0) / 2.0;
        let radius = 0.3 * n as f64;
        let u: Vec<f64> = (0..g.sites())
            .map(|s| {
                let c = g.coords(s);
                let r2 = (c[0] as f64 - c0).powi(2) + (c[1] as f64 - c0).powi(2);
                if r2 < radius * radius {
                    1.0 + 0.01 * (s % 7) as f64
                } else {
                    0.0
                }
            })
            .collect();
        let mass: f64 = u.iter().sum();
        let bins = ForwardOpSpec::radon_default_bins(&g);
        let op = ForwardOp::new(ForwardOpSpec::radon_uniform(16, bins), &g).unwrap();
        let sino = op.forward_apply(&u).unwrap();
        for a in 0..16 {
            let total: f64 = sino[a * bins..(a + 1) * bins].iter().sum();
            assert!((total - mass).abs() < 1e-6, "n={n} angle {a}: {total} vs {mass}");
        }
    }
}

#[test]
fn full_mask_fourier_roundtrip() {
    let g = Grid::new(&[12, 10]).unwrap();
    let u = phantom(PhantomKind::SharedEdgesDisc, &g, 1).channel(0);
    let op = ForwardOp::new(ForwardOpSpec::MaskedFourier { mask: vec![true; 120] }, &g).unwrap();
    let back = op.adjoint_apply(&op.forward_apply(&u).unwrap()).unwrap();
    for (a, b) in u.iter().zip(&back) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn operators_are_linear() {
    let g = Grid::new(&[9, 11]).unwrap();
    let a: Vec<f64> = (0..99).map(|k| (k as f64 * 0.71).sin()).collect();
    let b: Vec<f64> = (0..99).map(|k| (k as f64 * 1.37).cos()).collect();
    let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.5 * x - 0.75 * y).collect();
    let specs = [
        ForwardOpSpec::Identity,
        ForwardOpSpec::Convolution {
            kernel: vec![0.25, 0.5, 0.25],
            kernel_dims: vec![3, 1],
        },
        ForwardOpSpec::MaskedFourier {
            mask: (0..99).map(|s| s % 2 == 0).collect(),
        },
        ForwardOpSpec::radon_uniform(5, 17),
    ];
    for spec in specs {
        let op = ForwardOp::new(spec, &g).unwrap();
        let (ta, tb, tc) = (
            op.forward_apply(&a).unwrap(),
            op.forward_apply(&b).unwrap(),
            op.forward_apply(&combo).unwrap(),
        );
        for k in 0..tc.len() {
            assert!((tc[k] - (2.5 * ta[k] - 0.75 * tb[k])).abs() < 1e-12);
        }
    }
    let u = MultiImage::from_values(&g, 1, a.clone()).unwrap();
    let v = MultiImage::from_values(&g, 1, b.clone()).unwrap();
    let w = MultiImage::from_values(&g, 1, combo).unwrap();
    let (ga, gb, gw) = (grad(&u), grad(&v), grad(&w));
    for k in 0..gw.values().len() {
        assert!((gw.values()[k] - (2.5 * ga.values()[k] - 0.75 * gb.values()[k])).abs() < 1e-12);
    }
}
