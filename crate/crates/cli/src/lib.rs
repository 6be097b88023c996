//! Command-line front end: phantoms, solves, adjoint self-tests and rate
//! sweeps driven by flat `key = value` config files.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use thiserror::Error;

use mdrecon::diffops::{adjoint_check, GradOp, LinearOp, SymGradOp};
use mdrecon::discrepancy::{add_gaussian_noise, add_poisson_noise};
use mdrecon::forward::{ForwardOp, ForwardOpSpec};
use mdrecon::io::{read_mask, read_mfi, write_mfi, write_pgm_channels};
use mdrecon::problem::DiscrepancyKind;
use mdrecon::rates::{
    geometric_levels, phantom, run_rate_experiment, PhantomKind, RateChannel, RateExperiment, RateReport, RateRow,
    RateRule,
};
use mdrecon::{ChannelSpec, Grid, MultiImage, Problem, ProblemSpec, Regularizer, Solver};

use config::{ChannelConfig, NoiseConfig, OperatorConfig, RawConfig, RegularizerConfig, RunConfig};

/// Adjoint mismatch above which `adjoint-check` fails.
pub const ADJOINT_FAIL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    GateFailed(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub(crate) fn config(line: usize, msg: impl Into<String>) -> Self {
        CliError::Config { line, msg: msg.into() }
    }

    /// 1 for invalid input or failed checks, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

impl From<mdrecon::Error> for CliError {
    fn from(e: mdrecon::Error) -> Self {
        match e {
            mdrecon::Error::Divergence { .. } => CliError::Numerical(e.to_string()),
            mdrecon::Error::Io(io) => CliError::Io(io),
            other => CliError::Validation(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mdrecon", version, about = "Coupled multi-channel reconstruction with squared-norm and Kullback-Leibler data terms")]
pub struct Cli {
    /// Seed for phantom masks and noise; overrides `seed` in the config
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for output files (created if missing)
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker threads (results do not depend on this)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a test phantom as MFI1 plus one PGM per channel
    Phantom {
        /// affine_blocks, shared_edges_disc or smooth_bump
        kind: String,
        /// Grid dimensions followed by the channel count, e.g. `64 64 2`
        #[arg(num_args = 2..=4, required = true)]
        sizes: Vec<usize>,
    },
    /// Reconstruct from a config; writes u.mfi, u_ch*.pgm and diagnostics.csv
    Solve { config: PathBuf },
    /// Dot-product test of every operator pair
    AdjointCheck {
        /// Uses a built-in 64×64 suite when omitted
        config: Option<PathBuf>,
    },
    /// Noise-level sweep; writes rates.csv and rates_seed_<s>.csv
    Rates { config: PathBuf },
    /// Print version, schema and supported settings
    Info,
}

#[derive(Clone, Debug)]
pub struct Options {
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
}

/// Load a config file and apply the command-line seed override.
pub fn load_config(path: &Path, opts: &Options) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::from_raw(&RawConfig::load(path)?)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Validation(format!("cannot create {}: {e}", dir.display())))
}

fn echo_config(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    writeln!(out, "# resolved config")?;
    out.write_all(cfg.render().as_bytes())?;
    writeln!(out, "# seed {}", cfg.seed)?;
    Ok(())
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn operator_spec(cfg: &RunConfig, index: usize, op: &OperatorConfig) -> Result<ForwardOpSpec, CliError> {
    Ok(match op {
        OperatorConfig::Identity => ForwardOpSpec::Identity,
        OperatorConfig::Convolution { kernel, kernel_dims } => ForwardOpSpec::Convolution {
            kernel: kernel.clone(),
            kernel_dims: kernel_dims.clone(),
        },
        OperatorConfig::Fourier { fraction, mask_file } => ForwardOpSpec::MaskedFourier {
            mask: match mask_file {
                Some(path) => read_mask(path, &cfg.grid)?,
                None => ForwardOpSpec::fourier_line_mask(&cfg.grid, *fraction, mix(cfg.seed, index as u64, 1)),
            },
        },
        OperatorConfig::Radon { angles, bins } => {
            ForwardOpSpec::radon_uniform(*angles, bins.unwrap_or_else(|| ForwardOpSpec::radon_default_bins(&cfg.grid)))
        }
    })
}

fn regularizer(cfg: &RunConfig) -> Regularizer {
    match cfg.regularizer {
        RegularizerConfig::Tgv {
            alpha0,
            alpha1,
            coupling,
        } => Regularizer::Tgv {
            alpha0,
            alpha1,
            coupling,
        },
        RegularizerConfig::Wavelet { levels, alpha } => Regularizer::WaveletL21 { levels, alpha },
        RegularizerConfig::Quadratic { weight } => Regularizer::Quadratic { weight },
    }
}

/// Phantom, problem and data built from a config.
pub struct Prepared {
    pub truth: MultiImage,
    pub problem: Problem,
}

fn channel_data(
    cfg: &RunConfig,
    index: usize,
    ch: &ChannelConfig,
    op: &ForwardOp,
    truth: &MultiImage,
) -> Result<Vec<f64>, CliError> {
    if let Some(path) = &ch.data_file {
        let values = read_mfi(path)?.into_values();
        if values.len() != op.codomain_len() {
            return Err(CliError::Validation(format!(
                "{}: {} values, operator codomain has {}",
                path.display(),
                values.len(),
                op.codomain_len()
            )));
        }
        return Ok(values);
    }
    let mut clean = op.forward_apply(&truth.channel(index))?;
    if ch.kind == DiscrepancyKind::KullbackLeibler {
        clean.iter_mut().for_each(|v| *v = v.max(0.0) + ch.background);
    }
    let seed = mix(cfg.seed, index as u64, 2);
    Ok(match ch.noise {
        NoiseConfig::None => clean,
        NoiseConfig::Gaussian { level } => {
            let norm = clean.iter().map(|x| x * x).sum::<f64>().sqrt();
            add_gaussian_noise(&clean, level * norm, seed)?.data
        }
        NoiseConfig::Poisson { count_scale } => add_poisson_noise(&clean, count_scale, seed)?.data,
    })
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    if cfg.data.is_empty() {
        return Err(CliError::Validation("no data channels configured (channel.<i>.*)".into()));
    }
    let truth = phantom(cfg.phantom, &cfg.grid, cfg.channels);
    let mut data = Vec::with_capacity(cfg.data.len());
    for (i, ch) in cfg.data.iter().enumerate() {
        let spec = operator_spec(cfg, i, &ch.operator)?;
        let op = ForwardOp::new(spec.clone(), &cfg.grid)?;
        let f = channel_data(cfg, i, ch, &op, &truth)?;
        data.push(match ch.kind {
            DiscrepancyKind::Norm2Squared => ChannelSpec::l2(spec, f, ch.lambda),
            DiscrepancyKind::KullbackLeibler => {
                let len = f.len();
                ChannelSpec::kl(spec, f, ch.lambda, vec![ch.background; len])
            }
        });
    }
    let problem = Problem::new(ProblemSpec {
        grid: cfg.grid.clone(),
        channels: cfg.channels,
        regularizer: regularizer(cfg),
        data,
    })?;
    Ok(Prepared { truth, problem })
}

/// Exact minimizer for a quadratic regularizer with identity operators.
pub fn closed_form(problem: &Problem) -> Option<MultiImage> {
    let Regularizer::Quadratic { weight: w } = *problem.regularizer() else {
        return None;
    };
    if problem.data().iter().any(|c| c.operator != ForwardOpSpec::Identity) {
        return None;
    }
    let grid = problem.grid();
    let mut chans = Vec::new();
    for ch in problem.data() {
        let lam = ch.lambda;
        let col: Vec<f64> = match ch.kind {
            DiscrepancyKind::Norm2Squared if lam.is_infinite() => ch.data.clone(),
            DiscrepancyKind::Norm2Squared => ch.data.iter().map(|f| 2.0 * lam * f / (w + 2.0 * lam)).collect(),
            DiscrepancyKind::KullbackLeibler if lam.is_infinite() => return None,
            DiscrepancyKind::KullbackLeibler => ch
                .data
                .iter()
                .enumerate()
                .map(|(k, &f)| {
                    // w u² + (w c + λ) u + λ (c − f) = 0, constrained to u ≥ 0
                    let c = ch.background.get(k).copied().unwrap_or(0.0);
                    let b = w * c + lam;
                    let disc = b * b - 4.0 * w * lam * (c - f);
                    ((-b + disc.sqrt()) / (2.0 * w)).max(0.0)
                })
                .collect(),
        };
        chans.push(col);
    }
    MultiImage::from_channels(grid, &chans).ok()
}

fn rel_error(a: &MultiImage, b: &MultiImage) -> f64 {
    let mut d = a.clone();
    d.axpy(-1.0, b);
    d.norm() / b.norm().max(f64::MIN_POSITIVE)
}

#[derive(Clone, Debug)]
pub struct SolveSummary {
    pub iterations: usize,
    pub converged: bool,
    pub energy: f64,
    pub relative_error: f64,
    pub closed_form_error: Option<f64>,
    pub files: Vec<PathBuf>,
}

pub fn cmd_solve(cfg: &RunConfig, opts: &Options, out: &mut dyn Write) -> Result<SolveSummary, CliError> {
    echo_config(cfg, out)?;
    let prepared = prepare(cfg)?;
    ensure_dir(&opts.out_dir)?;
    let start = Instant::now();
    let solver = Solver::new(&prepared.problem, cfg.solver.clone())?;
    let result = solver.run(solver.initial_state(None)?)?;
    let elapsed = start.elapsed().as_secs_f64();
    let u = result.u();

    let mut files = Vec::new();
    let mfi = opts.out_dir.join("u.mfi");
    write_mfi(&mfi, u)?;
    files.push(mfi);
    files.extend(write_pgm_channels(&opts.out_dir, "u", u)?);
    let diag = opts.out_dir.join("diagnostics.csv");
    std::fs::write(&diag, result.diagnostics.to_csv())?;
    files.push(diag);

    let energy = solver.energy(&result.state)?.total;
    let relative_error = rel_error(u, &prepared.truth);
    let closed_form_error = closed_form(&prepared.problem).map(|exact| rel_error(u, &exact));
    writeln!(
        out,
        "iterations {} converged {} energy {:.9e} time {:.3}s",
        result.state.iteration,
        if result.converged { "yes" } else { "no" },
        energy,
        elapsed
    )?;
    writeln!(out, "relative error vs phantom {relative_error:.6e}")?;
    if let Some(e) = closed_form_error {
        writeln!(out, "relative error vs closed form {e:.6e}")?;
    }
    for f in &files {
        writeln!(out, "wrote {}", f.display())?;
    }
    Ok(SolveSummary {
        iterations: result.state.iteration,
        converged: result.converged,
        energy,
        relative_error,
        closed_form_error,
        files,
    })
}

pub fn cmd_phantom(kind: &str, sizes: &[usize], opts: &Options, out: &mut dyn Write) -> Result<Vec<PathBuf>, CliError> {
    let kind = PhantomKind::parse(kind).ok_or_else(|| {
        CliError::Validation(format!(
            "unknown phantom `{kind}` (expected affine_blocks, shared_edges_disc or smooth_bump)"
        ))
    })?;
    let Some((&channels, dims)) = sizes.split_last() else {
        return Err(CliError::Validation("expected grid dimensions and a channel count".into()));
    };
    if dims.is_empty() || channels == 0 {
        return Err(CliError::Validation("expected grid dimensions and a positive channel count".into()));
    }
    let grid = Grid::new(dims)?;
    writeln!(
        out,
        "# phantom {} dims {:?} channels {channels} seed {}",
        kind.name(),
        dims,
        opts.seed.unwrap_or(0)
    )?;
    ensure_dir(&opts.out_dir)?;
    let u = phantom(kind, &grid, channels);
    let mfi = opts.out_dir.join(format!("{}.mfi", kind.name()));
    write_mfi(&mfi, &u)?;
    let mut files = vec![mfi];
    files.extend(write_pgm_channels(&opts.out_dir, kind.name(), &u)?);
    for f in &files {
        writeln!(out, "wrote {}", f.display())?;
    }
    Ok(files)
}

#[derive(Clone, Debug)]
pub struct AdjointReport {
    pub rows: Vec<(String, f64)>,
}

impl AdjointReport {
    pub fn max_error(&self) -> f64 {
        self.rows.iter().map(|r| r.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= ADJOINT_FAIL
    }
}

/// The built-in adjoint suite: 64×64, one channel per operator kind.
pub fn default_adjoint_config() -> RunConfig {
    let text = "\
grid.dims = 64, 64
channels = 4
channel.1.operator = identity
channel.2.operator = convolution
channel.2.kernel = 1, 2, 1, 2, 4, 2, 1, 2, 1
channel.2.kernel_dims = 3, 3
channel.3.operator = fourier
channel.3.mask_fraction = 0.25
channel.4.operator = radon
channel.4.angles = 45
";
    RunConfig::from_raw(&RawConfig::parse(text).expect("built-in config parses")).expect("built-in config resolves")
}

pub fn cmd_adjoint_check(cfg: &RunConfig, out: &mut dyn Write) -> Result<AdjointReport, CliError> {
    echo_config(cfg, out)?;
    let grid = &cfg.grid;
    let mut ops: Vec<(String, Box<dyn LinearOp>)> = vec![
        (
            "grad".into(),
            Box::new(GradOp {
                grid: grid.clone(),
                channels: cfg.channels,
            }),
        ),
        (
            "sym_grad".into(),
            Box::new(SymGradOp {
                grid: grid.clone(),
                channels: cfg.channels,
            }),
        ),
    ];
    for (i, ch) in cfg.data.iter().enumerate() {
        let spec = operator_spec(cfg, i, &ch.operator)?;
        let name = format!("channel.{}.{}", i + 1, spec.kind_name());
        ops.push((name, Box::new(ForwardOp::new(spec, grid)?)));
    }
    let mut rows = Vec::new();
    for (name, op) in &ops {
        let start = Instant::now();
        let err = adjoint_check(op.as_ref(), 10, cfg.seed);
        let verdict = if err <= ADJOINT_FAIL { "PASS" } else { "FAIL" };
        writeln!(
            out,
            "{verdict} {name:<24} max relative error {err:.3e} ({:.3}s)",
            start.elapsed().as_secs_f64()
        )?;
        rows.push((name.clone(), err));
    }
    let report = AdjointReport { rows };
    writeln!(
        out,
        "{} max relative error {:.3e}",
        if report.passed() { "PASS" } else { "FAIL" },
        report.max_error()
    )?;
    Ok(report)
}

pub fn rate_experiment(cfg: &RunConfig) -> Result<RateExperiment, CliError> {
    let rc = cfg
        .rates
        .as_ref()
        .ok_or_else(|| CliError::Validation("no rate settings configured (rates.*)".into()))?;
    if cfg.data.is_empty() {
        return Err(CliError::Validation("no data channels configured (channel.<i>.*)".into()));
    }
    let quadratic = matches!(cfg.regularizer, RegularizerConfig::Quadratic { .. });
    if rc.gates.iter().any(|g| g.column == "bregman") && !quadratic {
        return Err(CliError::Validation("the bregman gate needs regularizer.kind = quadratic".into()));
    }
    let channels = cfg
        .data
        .iter()
        .enumerate()
        .map(|(i, ch)| {
            Ok(RateChannel {
                kind: ch.kind,
                operator: operator_spec(cfg, i, &ch.operator)?,
                background: ch.background,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(RateExperiment {
        grid: cfg.grid.clone(),
        phantom: cfg.phantom,
        channels,
        regularizer: regularizer(cfg),
        rule: RateRule::new(rc.rule, rc.mu.clone(), rc.nu.clone())?,
        levels: geometric_levels(rc.start, rc.ratio, rc.levels),
        seeds: (0..rc.seeds as u64).map(|k| cfg.seed.wrapping_add(k)).collect(),
        solver: cfg.solver.clone(),
        hard_lambda: rc.hard_lambda,
    })
}

fn column_fn(name: &str) -> Box<dyn Fn(&RateRow) -> f64> {
    match name {
        "bregman" => Box::new(|r: &RateRow| r.bregman.unwrap_or(f64::NAN)),
        "r" => Box::new(|r: &RateRow| r.regularizer),
        other => {
            let i: usize = other["data_".len()..].parse().expect("validated gate column");
            Box::new(move |r: &RateRow| r.data[i - 1])
        }
    }
}

#[derive(Clone, Debug)]
pub struct GateResult {
    pub column: String,
    pub slope: f64,
    pub min: f64,
    pub max: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct RatesSummary {
    pub report: RateReport,
    pub gates: Vec<GateResult>,
    pub files: Vec<PathBuf>,
}

pub fn cmd_rates(cfg: &RunConfig, opts: &Options, out: &mut dyn Write) -> Result<RatesSummary, CliError> {
    echo_config(cfg, out)?;
    let exp = rate_experiment(cfg)?;
    ensure_dir(&opts.out_dir)?;
    let start = Instant::now();
    let report = run_rate_experiment(&exp)?;
    let mut files = Vec::new();
    let mean = opts.out_dir.join("rates.csv");
    std::fs::write(&mean, report.mean.to_csv())?;
    files.push(mean);
    for run in &report.runs {
        let path = opts.out_dir.join(format!("rates_seed_{}.csv", run.seed));
        std::fs::write(&path, run.table.to_csv())?;
        files.push(path);
    }
    for f in &files {
        writeln!(out, "wrote {}", f.display())?;
    }
    writeln!(out, "sweep time {:.3}s", start.elapsed().as_secs_f64())?;
    if let Some(reason) = &report.aborted {
        writeln!(out, "ABORTED {reason}")?;
        return Err(CliError::Numerical(format!("rate sweep aborted: {reason}")));
    }
    let mut gates = Vec::new();
    for g in &cfg.rates.as_ref().expect("checked above").gates {
        let f = column_fn(&g.column);
        let slope = report.median_slope(|r| f(r))?;
        let passed = slope >= g.min && slope <= g.max;
        writeln!(
            out,
            "{} median slope of {} = {slope:.4} (required [{}, {}])",
            if passed { "PASS" } else { "FAIL" },
            g.column,
            g.min,
            g.max
        )?;
        gates.push(GateResult {
            column: g.column.clone(),
            slope,
            min: g.min,
            max: g.max,
            passed,
        });
    }
    let summary = RatesSummary { report, gates, files };
    if let Some(failed) = summary.gates.iter().find(|g| !g.passed) {
        return Err(CliError::GateFailed(format!(
            "slope of {} is {:.4}, outside [{}, {}]",
            failed.column, failed.slope, failed.min, failed.max
        )));
    }
    Ok(summary)
}

pub fn cmd_info(out: &mut dyn Write) -> Result<(), CliError> {
    writeln!(out, "mdrecon {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(out, "config schema {}", config::SCHEMA_VERSION)?;
    writeln!(out, "regularizers: tgv (frobenius, nuclear), wavelet, quadratic")?;
    writeln!(out, "operators: identity, convolution, fourier, radon")?;
    writeln!(out, "discrepancies: l2, kl")?;
    writeln!(out, "phantoms: affine_blocks, shared_edges_disc, smooth_bump")?;
    writeln!(out, "rate rules: two_norm, mixed_nkl, general")?;
    writeln!(out, "threads: {}", rayon::current_num_threads())?;
    Ok(())
}

fn dispatch(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let opts = Options {
        seed: cli.seed,
        out_dir: cli.out_dir.clone(),
    };
    match &cli.command {
        Command::Phantom { kind, sizes } => cmd_phantom(kind, sizes, &opts, out).map(|_| ()),
        Command::Solve { config } => cmd_solve(&load_config(config, &opts)?, &opts, out).map(|_| ()),
        Command::AdjointCheck { config } => {
            let cfg = match config {
                Some(path) => load_config(path, &opts)?,
                None => {
                    let mut cfg = default_adjoint_config();
                    if let Some(seed) = opts.seed {
                        cfg.seed = seed;
                    }
                    cfg
                }
            };
            let report = cmd_adjoint_check(&cfg, out)?;
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::Numerical(format!(
                    "adjoint mismatch {:.3e} exceeds {ADJOINT_FAIL:e}",
                    report.max_error()
                )))
            }
        }
        Command::Rates { config } => cmd_rates(&load_config(config, &opts)?, &opts, out).map(|_| ()),
        Command::Info => cmd_info(out),
    }
}

/// Parse arguments, run one command and return the process exit code.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli, out)),
            Err(e) => Err(CliError::Validation(format!("cannot start {n} threads: {e}"))),
        },
        None => dispatch(&cli, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
