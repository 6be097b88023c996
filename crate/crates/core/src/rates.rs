//! Phantoms, parameter-choice rules and noise-level sweeps that measure how
//! fast reconstructions approach the truth as the noise vanishes.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::discrepancy::{add_gaussian_noise, add_poisson_noise};
use crate::error::{shape_err, Error, Result};
use crate::forward::{ForwardOp, ForwardOpSpec};
use crate::grid::{Grid, MultiImage};
use crate::problem::{ChannelSpec, DiscrepancyKind, Problem, ProblemSpec, Regularizer};
use crate::solver::{energy_parts, Solver, SolverConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomKind {
    /// Piecewise affine blocks of side ≥ 8, with channel-specific slopes.
    AffineBlocks,
    /// A disc with an inner square; identical geometry in every channel,
    /// channel-specific intensities.
    SharedEdgesDisc,
    /// A smooth, strictly positive Gaussian bump.
    SmoothBump,
}

impl PhantomKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "affine_blocks" => Some(Self::AffineBlocks),
            "shared_edges_disc" => Some(Self::SharedEdgesDisc),
            "smooth_bump" => Some(Self::SmoothBump),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::AffineBlocks => "affine_blocks",
            Self::SharedEdgesDisc => "shared_edges_disc",
            Self::SmoothBump => "smooth_bump",
        }
    }
}

/// Normalized coordinate of the site center along each axis, in (0, 1).
fn unit_coords(grid: &Grid, site: usize) -> [f64; 3] {
    let c = grid.coords(site);
    let mut x = [0.0; 3];
    for k in 0..grid.ndim() {
        x[k] = (c[k] as f64 + 0.5) / grid.dims()[k] as f64;
    }
    x
}

/// Deterministic nonnegative test image with maximum 1 in every channel.
pub fn phantom(kind: PhantomKind, grid: &Grid, channels: usize) -> MultiImage {
    let d = grid.ndim();
    let mut u = MultiImage::zeros(grid, channels);
    for s in 0..grid.sites() {
        let x = unit_coords(grid, s);
        let c = grid.coords(s);
        for ch in 0..channels {
            let val = match kind {
                PhantomKind::AffineBlocks => {
                    let mut block = 0usize;
                    for k in 0..d {
                        let pieces = (grid.dims()[k] / 8).max(1);
                        let size = grid.dims()[k].div_ceil(pieces);
                        block = block * pieces + c[k] / size;
                    }
                    let base = 0.3 + 0.1 * ((block + 2 * ch) % 5) as f64;
                    let mut v = base;
                    for k in 0..d {
                        let g = ((block * 3 + ch * 7 + k * 5) % 7) as f64 / 6.0 - 0.5;
                        v += 0.4 * g * c[k] as f64 / grid.dims()[k] as f64;
                    }
                    v
                }
                PhantomKind::SharedEdgesDisc => {
                    let r2: f64 = (0..d).map(|k| (x[k] - 0.5).powi(2)).sum();
                    let in_square = (0..d).all(|k| {
                        let lo = if k == 0 { 0.38 } else { 0.42 };
                        x[k] > lo && x[k] < lo + 0.2
                    });
                    let (outer, inner) = [(1.0, 0.45), (0.5, 1.0), (0.8, 0.25)][ch % 3];
                    if in_square {
                        inner
                    } else if r2 < 0.33 * 0.33 {
                        outer
                    } else {
                        0.0
                    }
                }
                PhantomKind::SmoothBump => {
                    let shift = 0.04 * ch as f64;
                    let r2: f64 = (0..d).map(|k| (x[k] - 0.5 - if k == 0 { shift } else { 0.0 }).powi(2)).sum();
                    0.2 + 0.8 * (-r2 / (2.0 * 0.2 * 0.2)).exp()
                }
            };
            u.set(s, ch, val);
        }
    }
    for ch in 0..channels {
        let data = u.channel(ch);
        let max = data.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            u.set_channel(ch, &data.iter().map(|v| v / max).collect::<Vec<_>>());
        }
    }
    u
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RuleKind {
    /// λ_i = δ_i^{−(2 − 1/μ_i)}, for squared-norm channels.
    TwoNorm,
    /// Mixed squared-norm / Kullback-Leibler: μ̄ = min({μ_i} ∪ {μ_j/2}),
    /// ε_i = μ̄/μ_i, λ_i = δ_i^{−(2−ε_i)} (squared norm) or δ_i^{−(1−ε_i)} (KL).
    MixedNKL,
    /// η_i = μ_i ν_i, ε_i = min η / μ_i, λ_i = δ_i^{−(1−ε_i)}.
    General,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateRule {
    pub kind: RuleKind,
    pub mu: Vec<f64>,
    /// Only read by [`RuleKind::General`].
    pub nu: Vec<f64>,
}

impl RateRule {
    pub fn new(kind: RuleKind, mu: Vec<f64>, nu: Vec<f64>) -> Result<Self> {
        if mu.is_empty() || mu.iter().any(|&m| !(m >= 1.0 && m.is_finite())) {
            return Err(Error::InvalidArgument(format!("exponents mu must be >= 1, got {mu:?}")));
        }
        match kind {
            RuleKind::TwoNorm => {
                let min = mu.iter().copied().fold(f64::INFINITY, f64::min);
                if min != 1.0 {
                    return Err(Error::InvalidArgument(
                        "two-norm rule needs mu_i = 1 for some channel".into(),
                    ));
                }
            }
            RuleKind::General => {
                if nu.len() != mu.len() || nu.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
                    return Err(Error::InvalidArgument(format!(
                        "general rule needs one nu_i in (0, 1] per channel, got {nu:?}"
                    )));
                }
            }
            RuleKind::MixedNKL => {}
        }
        Ok(Self { kind, mu, nu })
    }

    /// Exponent e_i with λ_i = δ_i^{−e_i}.
    pub fn exponents(&self, kinds: &[DiscrepancyKind]) -> Result<Vec<f64>> {
        if kinds.len() != self.mu.len() {
            return shape_err(format!("{} channel kinds for {} exponents", kinds.len(), self.mu.len()));
        }
        Ok(match self.kind {
            RuleKind::TwoNorm => {
                if kinds.iter().any(|&k| k != DiscrepancyKind::Norm2Squared) {
                    return Err(Error::InvalidArgument(
                        "two-norm rule applies to squared-norm channels only".into(),
                    ));
                }
                self.mu.iter().map(|m| 2.0 - 1.0 / m).collect()
            }
            RuleKind::MixedNKL => {
                let mu_bar = self
                    .mu
                    .iter()
                    .zip(kinds)
                    .map(|(&m, &k)| match k {
                        DiscrepancyKind::Norm2Squared => m,
                        DiscrepancyKind::KullbackLeibler => m / 2.0,
                    })
                    .fold(f64::INFINITY, f64::min);
                self.mu
                    .iter()
                    .zip(kinds)
                    .map(|(&m, &k)| {
                        let eps = mu_bar / m;
                        match k {
                            DiscrepancyKind::Norm2Squared => 2.0 - eps,
                            DiscrepancyKind::KullbackLeibler => 1.0 - eps,
                        }
                    })
                    .collect()
            }
            RuleKind::General => {
                let eta_min = self
                    .mu
                    .iter()
                    .zip(&self.nu)
                    .map(|(m, n)| m * n)
                    .fold(f64::INFINITY, f64::min);
                self.mu.iter().map(|m| 1.0 - eta_min / m).collect()
            }
        })
    }

    /// Power p_i of the discrepancy in the noise level δ_i = D_i^{1/p_i}.
    pub fn discrepancy_power(kind: DiscrepancyKind) -> f64 {
        match kind {
            DiscrepancyKind::Norm2Squared => 2.0,
            DiscrepancyKind::KullbackLeibler => 1.0,
        }
    }
}

/// λ_i from realized noise levels; δ_i = 0 gives `f64::INFINITY`.
pub fn choose_lambdas(rule: &RateRule, deltas: &[f64], kinds: &[DiscrepancyKind]) -> Result<Vec<f64>> {
    let e = rule.exponents(kinds)?;
    if deltas.len() != e.len() {
        return shape_err(format!("{} noise levels for {} channels", deltas.len(), e.len()));
    }
    deltas
        .iter()
        .zip(&e)
        .map(|(&d, &ex)| {
            if !(d >= 0.0 && d.is_finite()) {
                Err(Error::InvalidArgument(format!("noise level {d} must be nonnegative")))
            } else if d == 0.0 {
                Ok(f64::INFINITY)
            } else {
                Ok(d.powf(-ex))
            }
        })
        .collect()
}

/// (weight/2)‖u − u†‖², the Bregman distance of (weight/2)‖·‖² at u† with
/// subgradient weight·u†.
pub fn bregman_quadratic(u: &MultiImage, u_true: &MultiImage, weight: f64) -> Result<f64> {
    u.check_shape(u_true)?;
    Ok(0.5
        * weight
        * u.values()
            .iter()
            .zip(u_true.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares line through (log x, log y).
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<LogLogFit> {
    if xs.len() != ys.len() {
        return shape_err(format!("{} abscissae and {} ordinates", xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(Error::InvalidArgument("slope fit needs at least 3 points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument("slope fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("slope fit needs distinct abscissae".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LogLogFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

/// Geometric noise levels `start · ratio^k`, k = 0..levels.
pub fn geometric_levels(start: f64, ratio: f64, levels: usize) -> Vec<f64> {
    (0..levels).map(|k| start * ratio.powi(k as i32)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateChannel {
    pub kind: DiscrepancyKind,
    pub operator: ForwardOpSpec,
    /// Constant background added to Kullback-Leibler data.
    pub background: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateExperiment {
    pub grid: Grid,
    pub phantom: PhantomKind,
    pub channels: Vec<RateChannel>,
    pub regularizer: Regularizer,
    pub rule: RateRule,
    /// Base noise levels δⁿ, strictly decreasing. Channel i is perturbed to
    /// relative level (δⁿ)^{μ_i}: ‖f − f†‖ = ‖f†‖(δⁿ)^{μ_i} for squared-norm
    /// channels, KL(f†, f) = Σf†·(δⁿ)^{μ_i} for Kullback-Leibler channels.
    pub levels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub solver: SolverConfig,
    /// Weight used in place of λ = ∞ when a level is noise free.
    pub hard_lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateRow {
    pub level: usize,
    pub delta: f64,
    /// Realized noise level δ_i = D_i(f†_i, f_i)^{1/p_i}.
    pub channel_delta: Vec<f64>,
    pub lambda: Vec<f64>,
    /// D_i(T_i u, f_i) against the noisy data.
    pub data: Vec<f64>,
    /// D_i(T_i u, f†_i) against the exact data.
    pub data_exact: Vec<f64>,
    pub regularizer: f64,
    pub bregman: Option<f64>,
    pub relative_error: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RateTable {
    pub rows: Vec<RateRow>,
}

fn fmt_num(x: f64) -> String {
    format!("{x:.12e}")
}

impl RateTable {
    pub fn channels(&self) -> usize {
        self.rows.first().map_or(0, |r| r.lambda.len())
    }

    pub fn to_csv(&self) -> String {
        let n = self.channels();
        let mut out = String::from("level,delta");
        for i in 1..=n {
            let _ = write!(out, ",delta_{i},lambda_{i},data_{i}");
        }
        out.push_str(",R,bregman\n");
        for row in &self.rows {
            let _ = write!(out, "{},{}", row.level, fmt_num(row.delta));
            for i in 0..n {
                let _ = write!(
                    out,
                    ",{},{},{}",
                    fmt_num(row.channel_delta[i]),
                    fmt_num(row.lambda[i]),
                    fmt_num(row.data[i])
                );
            }
            let breg = row.bregman.map_or(String::from("nan"), fmt_num);
            let _ = writeln!(out, ",{},{}", fmt_num(row.regularizer), breg);
        }
        out
    }

    /// Slope of log(column) against log(δ).
    pub fn slope(&self, column: impl Fn(&RateRow) -> f64) -> Result<LogLogFit> {
        let xs: Vec<f64> = self.rows.iter().map(|r| r.delta).collect();
        let ys: Vec<f64> = self.rows.iter().map(column).collect();
        fit_loglog_slope(&xs, &ys)
    }

    /// Row-wise arithmetic mean of several tables over the same levels.
    pub fn mean(tables: &[RateTable]) -> Result<RateTable> {
        let Some(first) = tables.first() else {
            return Ok(RateTable::default());
        };
        let rows = first.rows.len();
        if tables.iter().any(|t| t.rows.len() != rows) {
            return shape_err("tables have different lengths");
        }
        let k = tables.len() as f64;
        let avg = |f: &dyn Fn(&RateTable) -> f64| tables.iter().map(f).sum::<f64>() / k;
        let n = first.channels();
        let mut out = Vec::with_capacity(rows);
        for j in 0..rows {
            let vec_avg = |g: &dyn Fn(&RateRow) -> &Vec<f64>| -> Vec<f64> {
                (0..n).map(|i| avg(&|t| g(&t.rows[j])[i])).collect()
            };
            out.push(RateRow {
                level: first.rows[j].level,
                delta: first.rows[j].delta,
                channel_delta: vec_avg(&|r| &r.channel_delta),
                lambda: vec_avg(&|r| &r.lambda),
                data: vec_avg(&|r| &r.data),
                data_exact: vec_avg(&|r| &r.data_exact),
                regularizer: avg(&|t| t.rows[j].regularizer),
                bregman: first.rows[j]
                    .bregman
                    .map(|_| avg(&|t| t.rows[j].bregman.unwrap_or(f64::NAN))),
                relative_error: avg(&|t| t.rows[j].relative_error),
                iterations: tables.iter().map(|t| t.rows[j].iterations).max().unwrap_or(0),
            });
        }
        Ok(RateTable { rows: out })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub table: RateTable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateReport {
    pub runs: Vec<SeedRun>,
    /// Seed average, in level order.
    pub mean: RateTable,
    /// Set when a solve diverged or did not converge; tables then stop at
    /// the last completed level.
    pub aborted: Option<String>,
}

impl RateReport {
    /// Median over seeds of the per-seed slope of `column` against δ.
    pub fn median_slope(&self, column: impl Fn(&RateRow) -> f64 + Copy) -> Result<f64> {
        let mut slopes = self
            .runs
            .iter()
            .map(|r| r.table.slope(column).map(|f| f.slope))
            .collect::<Result<Vec<_>>>()?;
        if slopes.is_empty() {
            return Err(Error::InvalidArgument("no completed runs".into()));
        }
        slopes.sort_by(f64::total_cmp);
        let m = slopes.len();
        Ok(if m % 2 == 1 {
            slopes[m / 2]
        } else {
            0.5 * (slopes[m / 2 - 1] + slopes[m / 2])
        })
    }
}

/// SplitMix64 finalizer; decorrelates per-(seed, level, channel) streams.
fn mix_seed(seed: u64, level: usize, channel: usize) -> u64 {
    let mut z = seed
        .wrapping_add((level as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((channel as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Exact {
    truth: MultiImage,
    data: Vec<Vec<f64>>,
    kinds: Vec<DiscrepancyKind>,
}

fn exact_data(exp: &RateExperiment) -> Result<Exact> {
    let n = exp.channels.len();
    if n == 0 {
        return Err(Error::InvalidArgument("rate experiment needs channels".into()));
    }
    if exp.rule.mu.len() != n {
        return shape_err(format!("{} exponents for {} channels", exp.rule.mu.len(), n));
    }
    if exp.levels.len() < 3 {
        return Err(Error::InvalidArgument("rate experiment needs at least 3 levels".into()));
    }
    if exp.levels.windows(2).any(|w| !(w[1] < w[0])) || exp.levels.iter().any(|&d| d < 0.0) {
        return Err(Error::InvalidArgument("noise levels must be nonnegative and strictly decreasing".into()));
    }
    if exp.seeds.is_empty() {
        return Err(Error::InvalidArgument("rate experiment needs seeds".into()));
    }
    let truth = phantom(exp.phantom, &exp.grid, n);
    let mut data = Vec::with_capacity(n);
    for (i, ch) in exp.channels.iter().enumerate() {
        let op = ForwardOp::new(ch.operator.clone(), &exp.grid)?;
        let mut f = op.forward_apply(&truth.channel(i))?;
        if ch.kind == DiscrepancyKind::KullbackLeibler {
            if f.iter().any(|&v| v < -1e-12) {
                return Err(Error::InvalidArgument(format!(
                    "channel {}: exact data of a Kullback-Leibler channel must be nonnegative",
                    i + 1
                )));
            }
            f.iter_mut().for_each(|v| *v = v.max(0.0) + ch.background);
        }
        data.push(f);
    }
    Ok(Exact {
        truth,
        data,
        kinds: exp.channels.iter().map(|c| c.kind).collect(),
    })
}

/// Noisy data for one level and seed, with the realized δ_i.
fn noisy_data(exp: &RateExperiment, exact: &Exact, level: usize, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let base = exp.levels[level];
    let mut out = Vec::new();
    let mut deltas = Vec::new();
    for (i, (f, kind)) in exact.data.iter().zip(&exact.kinds).enumerate() {
        let rel = base.powf(exp.rule.mu[i]);
        let s = mix_seed(seed, level, i);
        if rel == 0.0 {
            out.push(f.clone());
            deltas.push(0.0);
            continue;
        }
        match kind {
            DiscrepancyKind::Norm2Squared => {
                let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nr = add_gaussian_noise(f, norm * rel, s)?;
                deltas.push(nr.delta);
                out.push(nr.data);
            }
            DiscrepancyKind::KullbackLeibler => {
                // KL(f†, f) ≈ (#positive entries)/(2·scale) for Poisson counts at `scale`
                let target = f.iter().sum::<f64>() * rel;
                let positive = f.iter().filter(|&&v| v > 0.0).count() as f64;
                let scale = positive / (2.0 * target);
                let nr = add_poisson_noise(f, scale, s)?;
                deltas.push(nr.delta);
                out.push(nr.data);
            }
        }
    }
    Ok((out, deltas))
}

fn run_level(exp: &RateExperiment, exact: &Exact, level: usize, seed: u64) -> Result<(RateRow, bool)> {
    let (noisy, deltas) = noisy_data(exp, exact, level, seed)?;
    let lambda: Vec<f64> = choose_lambdas(&exp.rule, &deltas, &exact.kinds)?
        .into_iter()
        .map(|l| if l.is_infinite() { exp.hard_lambda } else { l })
        .collect();
    let n = exp.channels.len();
    let make = |data: &[Vec<f64>]| -> Result<Problem> {
        Problem::new(ProblemSpec {
            grid: exp.grid.clone(),
            channels: n,
            regularizer: exp.regularizer.clone(),
            data: exp
                .channels
                .iter()
                .enumerate()
                .map(|(i, ch)| match ch.kind {
                    DiscrepancyKind::Norm2Squared => ChannelSpec::l2(ch.operator.clone(), data[i].clone(), lambda[i]),
                    DiscrepancyKind::KullbackLeibler => ChannelSpec::kl(
                        ch.operator.clone(),
                        data[i].clone(),
                        lambda[i],
                        vec![ch.background; data[i].len()],
                    ),
                })
                .collect(),
        })
    };
    let problem = make(&noisy)?;
    let solver = Solver::new(&problem, exp.solver.clone())?;
    let out = solver.run(solver.initial_state(None)?)?;
    let parts = energy_parts(&problem, out.u(), out.state.v())?;
    let exact_problem = make(&exact.data)?;
    let exact_parts = energy_parts(&exact_problem, out.u(), out.state.v())?;
    let bregman = match exp.regularizer {
        Regularizer::Quadratic { weight } => Some(bregman_quadratic(out.u(), &exact.truth, weight)?),
        _ => None,
    };
    let mut diff = out.u().clone();
    diff.axpy(-1.0, &exact.truth);
    Ok((
        RateRow {
            level,
            delta: exp.levels[level],
            channel_delta: deltas,
            lambda,
            data: parts.data,
            data_exact: exact_parts.data,
            regularizer: parts.regularizer,
            bregman,
            relative_error: diff.norm() / exact.truth.norm().max(f64::MIN_POSITIVE),
            iterations: out.state.iteration,
        },
        out.converged,
    ))
}

/// Sweep all (level, seed) pairs. Jobs run in parallel; results are
/// assembled in (seed, level) order so the report does not depend on
/// scheduling.
pub fn run_rate_experiment(exp: &RateExperiment) -> Result<RateReport> {
    let exact = exact_data(exp)?;
    let jobs: Vec<(usize, usize)> = (0..exp.seeds.len())
        .flat_map(|s| (0..exp.levels.len()).map(move |l| (s, l)))
        .collect();
    let results: Vec<Result<(RateRow, bool)>> = jobs
        .par_iter()
        .map(|&(s, l)| run_level(exp, &exact, l, exp.seeds[s]))
        .collect();

    let mut runs: Vec<SeedRun> = exp
        .seeds
        .iter()
        .map(|&seed| SeedRun {
            seed,
            table: RateTable::default(),
        })
        .collect();
    let mut stop_level = exp.levels.len();
    let mut aborted = None;
    for (&(s, l), res) in jobs.iter().zip(results) {
        if l >= stop_level {
            continue;
        }
        match res {
            Ok((row, true)) => runs[s].table.rows.push(row),
            Ok((row, false)) => {
                aborted.get_or_insert(format!(
                    "seed {} level {}: no convergence within {} iterations",
                    exp.seeds[s], l, row.iterations
                ));
                stop_level = l;
            }
            Err(e) => {
                aborted.get_or_insert(format!("seed {} level {l}: {e}", exp.seeds[s]));
                stop_level = l;
            }
        }
    }
    for run in &mut runs {
        run.table.rows.truncate(stop_level);
    }
    let tables: Vec<RateTable> = runs.iter().map(|r| r.table.clone()).collect();
    let mean = RateTable::mean(&tables)?;
    Ok(RateReport { runs, mean, aborted })
}

/// Two-channel comparison of coupled against channel-by-channel
/// reconstruction on the shared-edges phantom: channel 1 is seen through
/// undersampled Fourier lines with Gaussian noise, channel 2 through a sparse
/// Radon transform with Poisson counts on a constant background.
#[derive(Clone, Debug, PartialEq)]
pub struct JointBenefitSetup {
    pub size: usize,
    pub fourier_fraction: f64,
    /// ‖f − f†‖ / ‖f†‖ on the Fourier channel.
    pub fourier_noise: f64,
    pub radon_angles: usize,
    /// Expected counts per unit of line integral.
    pub count_scale: f64,
    /// Background as a fraction of the mean clean line integral.
    pub background: f64,
    pub lambdas: [f64; 2],
    pub alpha0: f64,
    pub alpha1: f64,
    pub solver: SolverConfig,
}

impl Default for JointBenefitSetup {
    fn default() -> Self {
        Self {
            size: 32,
            fourier_fraction: 0.25,
            fourier_noise: 0.05,
            radon_angles: 12,
            count_scale: 20.0,
            background: 0.05,
            lambdas: [20.0, 1.0],
            alpha0: 0.2,
            alpha1: 0.1,
            solver: SolverConfig {
                max_iters: 1500,
                tol: 1e-6,
                record_every: 0,
                ..SolverConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointBenefitResult {
    pub seed: u64,
    pub rmse_joint: Vec<f64>,
    pub rmse_single: Vec<f64>,
}

impl JointBenefitResult {
    pub fn joint_wins(&self) -> bool {
        self.rmse_joint.iter().zip(&self.rmse_single).all(|(j, s)| j < s)
    }
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn run_joint_benefit(setup: &JointBenefitSetup, seed: u64) -> Result<JointBenefitResult> {
    let grid = Grid::new(&[setup.size, setup.size])?;
    let truth = phantom(PhantomKind::SharedEdgesDisc, &grid, 2);
    let fourier = ForwardOpSpec::MaskedFourier {
        mask: ForwardOpSpec::fourier_line_mask(&grid, setup.fourier_fraction, 0),
    };
    let radon = ForwardOpSpec::radon_uniform(setup.radon_angles, ForwardOpSpec::radon_default_bins(&grid));

    let f1_clean = ForwardOp::new(fourier.clone(), &grid)?.forward_apply(&truth.channel(0))?;
    let norm1 = f1_clean.iter().map(|x| x * x).sum::<f64>().sqrt();
    let f1 = add_gaussian_noise(&f1_clean, setup.fourier_noise * norm1, mix_seed(seed, 0, 0))?.data;

    let sino = ForwardOp::new(radon.clone(), &grid)?.forward_apply(&truth.channel(1))?;
    let mean = sino.iter().sum::<f64>() / sino.len() as f64;
    let bg = vec![setup.background * mean; sino.len()];
    let clean2: Vec<f64> = sino.iter().zip(&bg).map(|(a, b)| a.max(0.0) + b).collect();
    let f2 = add_poisson_noise(&clean2, setup.count_scale, mix_seed(seed, 0, 1))?.data;

    let tgv = |coupling| Regularizer::Tgv {
        alpha0: setup.alpha0,
        alpha1: setup.alpha1,
        coupling,
    };
    let ch1 = ChannelSpec::l2(fourier, f1, setup.lambdas[0]);
    let ch2 = ChannelSpec::kl(radon, f2, setup.lambdas[1], bg);
    let solve_with = |channels: Vec<ChannelSpec>, coupling| -> Result<MultiImage> {
        let problem = Problem::new(ProblemSpec {
            grid: grid.clone(),
            channels: channels.len(),
            regularizer: tgv(coupling),
            data: channels,
        })?;
        let solver = Solver::new(&problem, setup.solver.clone())?;
        Ok(solver.run(solver.initial_state(None)?)?.state.u)
    };
    let joint = solve_with(vec![ch1.clone(), ch2.clone()], crate::grid::Coupling::Nuclear)?;
    let single1 = solve_with(vec![ch1], crate::grid::Coupling::Frobenius)?;
    let single2 = solve_with(vec![ch2], crate::grid::Coupling::Frobenius)?;
    Ok(JointBenefitResult {
        seed,
        rmse_joint: (0..2).map(|c| rmse(&joint.channel(c), &truth.channel(c))).collect(),
        rmse_single: vec![
            rmse(&single1.channel(0), &truth.channel(0)),
            rmse(&single2.channel(0), &truth.channel(1)),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffops::grad;
    use crate::grid::{Coupling, VectorField};
    use crate::solver::primal_energy;

    #[test]
    fn phantoms_are_normalized() {
        let g = Grid::new(&[16, 12]).unwrap();
        for kind in [PhantomKind::AffineBlocks, PhantomKind::SharedEdgesDisc, PhantomKind::SmoothBump] {
            let u = phantom(kind, &g, 3);
            assert!(u.values().iter().all(|&v| v >= 0.0));
            for c in 0..3 {
                let max = u.channel(c).iter().copied().fold(0.0, f64::max);
                assert!((max - 1.0).abs() < 1e-15, "{kind:?}");
            }
        }
    }

    #[test]
    fn shared_edges_supports_match() {
        let g = Grid::new(&[24, 24]).unwrap();
        let u = phantom(PhantomKind::SharedEdgesDisc, &g, 3);
        let support = |c: usize| u.channel(c).iter().map(|&v| v > 0.0).collect::<Vec<_>>();
        assert_eq!(support(0), support(1));
        assert_eq!(support(0), support(2));
        assert_ne!(u.channel(0), u.channel(1));
    }

    #[test]
    fn single_affine_block_has_zero_tgv() {
        let g = Grid::new(&[8, 8]).unwrap();
        let u = phantom(PhantomKind::AffineBlocks, &g, 1);
        let p = Problem::new(ProblemSpec {
            grid: g,
            channels: 1,
            regularizer: Regularizer::Tgv {
                alpha0: 1.0,
                alpha1: 1.0,
                coupling: Coupling::Frobenius,
            },
            data: vec![],
        })
        .unwrap();
        let v: VectorField = grad(&u);
        assert!(primal_energy(&p, &u, Some(&v)).unwrap() < 1e-13);
    }

    #[test]
    fn lambda_rules() {
        let l2 = DiscrepancyKind::Norm2Squared;
        let kl = DiscrepancyKind::KullbackLeibler;
        let two = RateRule::new(RuleKind::TwoNorm, vec![1.0], vec![]).unwrap();
        assert!((choose_lambdas(&two, &[0.1], &[l2]).unwrap()[0] - 10.0).abs() < 1e-12);
        assert_eq!(choose_lambdas(&two, &[0.0], &[l2]).unwrap()[0], f64::INFINITY);
        assert!(RateRule::new(RuleKind::TwoNorm, vec![2.0], vec![]).is_err());

        // η = (1/2, 1), ε = (1/2, 1/4)
        let gen = RateRule::new(RuleKind::General, vec![1.0, 2.0], vec![0.5, 0.5]).unwrap();
        let (d1, d2) = (0.3, 0.07);
        let lam = choose_lambdas(&gen, &[d1, d2], &[l2, l2]).unwrap();
        assert!((lam[0] - 1.0 / d1.sqrt()).abs() < 1e-12);
        assert!((lam[1] - d2.powf(-0.75)).abs() < 1e-12);

        // μ̄ = min(1, 2/2) = 1, ε = (1, 1/2)
        let mixed = RateRule::new(RuleKind::MixedNKL, vec![1.0, 2.0], vec![]).unwrap();
        let lam = choose_lambdas(&mixed, &[d1, d2], &[l2, kl]).unwrap();
        assert!((lam[0] - 1.0 / d1).abs() < 1e-12);
        assert!((lam[1] - 1.0 / d2.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn two_norm_scale_covariance() {
        let l2 = DiscrepancyKind::Norm2Squared;
        let rule = RateRule::new(RuleKind::TwoNorm, vec![1.0, 2.0, 3.0], vec![]).unwrap();
        let d = [0.2, 0.05, 0.01];
        let a = choose_lambdas(&rule, &d, &[l2; 3]).unwrap();
        let b = choose_lambdas(&rule, &d.map(|x| x / 2.0), &[l2; 3]).unwrap();
        for i in 0..3 {
            let expect = 2f64.powf(2.0 - 1.0 / rule.mu[i]);
            assert!((b[i] / a[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn bregman_matches_definition() {
        let g = Grid::new(&[4]).unwrap();
        let a = MultiImage::from_values(&g, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = MultiImage::from_values(&g, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bregman_quadratic(&a, &b, 1.0).unwrap(), 2.0);
        assert_eq!(bregman_quadratic(&a, &a, 3.0).unwrap(), 0.0);

        let w = 0.7;
        let r = |x: &MultiImage| 0.5 * w * x.norm().powi(2);
        let diff: f64 = a.values().iter().zip(b.values()).map(|(x, y)| w * y * (x - y)).sum();
        let direct = r(&a) - r(&b) - diff;
        assert!((bregman_quadratic(&a, &b, w).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn loglog_fits() {
        let xs = [0.1, 0.05, 0.025, 0.0125];
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let f = fit_loglog_slope(&xs, &sq).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        let lin: Vec<f64> = xs.iter().map(|x| 7.5 * x).collect();
        assert!((fit_loglog_slope(&xs, &lin).unwrap().slope - 1.0).abs() < 1e-12);
        // three collinear log points: slope equals the end-to-end two-point slope
        let (x3, y3): ([f64; 3], [f64; 3]) = ([1.0, 2.0, 4.0], [3.0, 3.0 * 2f64.powf(1.5), 3.0 * 4f64.powf(1.5)]);
        let two_point = (y3[2] / y3[0]).ln() / (x3[2] / x3[0]).ln();
        assert!((fit_loglog_slope(&x3, &y3).unwrap().slope - two_point).abs() < 1e-12);
        assert!(fit_loglog_slope(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(fit_loglog_slope(&[1.0, 2.0, 3.0], &[1.0, 0.0, 2.0]).is_err());
    }

    #[test]
    fn seed_streams_differ() {
        assert_ne!(mix_seed(1, 0, 0), mix_seed(1, 0, 1));
        assert_ne!(mix_seed(1, 0, 0), mix_seed(1, 1, 0));
        assert_ne!(mix_seed(1, 0, 0), mix_seed(2, 0, 0));
    }
}
