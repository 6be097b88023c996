//! Flat `key = value` run configuration.
//!
//! Keys may be dotted (`channel.2.kind = kl`); `#` starts a comment. Every key
//! must be consumed by the resolver, so typos surface as errors with the line
//! they were written on.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mdrecon::problem::DiscrepancyKind;
use mdrecon::rates::{PhantomKind, RuleKind};
use mdrecon::{Coupling, Grid, SolverConfig, StepPolicy};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed but unresolved key/value pairs.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
    source: Option<PathBuf>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .split('.')
            .all(|part| !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(CliError::config(line, format!("expected `key = value`, found `{content}`")));
            };
            let key = key.trim().to_ascii_lowercase();
            let value = value.trim().to_string();
            if !valid_key(&key) {
                return Err(CliError::config(line, format!("invalid key `{key}`")));
            }
            if value.is_empty() {
                return Err(CliError::config(line, format!("`{key}` has no value")));
            }
            if let Some(prev) = entries.get(&key) {
                let prev: &Entry = prev;
                return Err(CliError::config(
                    line,
                    format!("`{key}` already set on line {}", prev.line),
                ));
            }
            entries.insert(key, Entry { value, line });
        }
        Ok(Self { entries, source: None })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.source = Some(path.to_path_buf());
        Ok(cfg)
    }

    /// Relative file references resolve against the config file's directory.
    fn resolve_path(&self, value: &str) -> PathBuf {
        let p = PathBuf::from(value);
        match (&self.source, p.is_relative()) {
            (Some(src), true) => src.parent().map_or(p.clone(), |d| d.join(&p)),
            _ => p,
        }
    }
}

/// Typed access that remembers which keys were read.
struct Reader<'a> {
    raw: &'a RawConfig,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl<'a> Reader<'a> {
    fn new(raw: &'a RawConfig) -> Self {
        Self {
            raw,
            used: Default::default(),
        }
    }

    fn get(&self, key: &str) -> Option<&'a Entry> {
        let e = self.raw.entries.get(key);
        if e.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        e
    }

    fn has(&self, key: &str) -> bool {
        self.raw.entries.contains_key(key)
    }

    fn parse<T>(&self, key: &str, what: &str, f: impl Fn(&str) -> Option<T>) -> Result<Option<T>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(e) => f(&e.value)
                .map(Some)
                .ok_or_else(|| CliError::config(e.line, format!("`{key}`: expected {what}, found `{}`", e.value))),
        }
    }

    fn str(&self, key: &str) -> Option<&'a str> {
        self.get(key).map(|e| e.value.as_str())
    }

    fn f64(&self, key: &str) -> Result<Option<f64>, CliError> {
        self.parse(key, "a number", parse_f64)
    }

    fn usize(&self, key: &str) -> Result<Option<usize>, CliError> {
        self.parse(key, "a nonnegative integer", |s| s.parse().ok())
    }

    fn u64(&self, key: &str) -> Result<Option<u64>, CliError> {
        self.parse(key, "a nonnegative integer", |s| s.parse().ok())
    }

    fn bool(&self, key: &str) -> Result<Option<bool>, CliError> {
        self.parse(key, "true or false", |s| match s {
            "true" | "yes" | "1" => Some(true),
            "false" | "no" | "0" => Some(false),
            _ => None,
        })
    }

    fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        self.parse(key, "a comma-separated list of numbers", |s| {
            s.split(',').map(|t| parse_f64(t.trim())).collect()
        })
    }

    fn usize_list(&self, key: &str) -> Result<Option<Vec<usize>>, CliError> {
        self.parse(key, "a comma-separated list of integers", |s| {
            s.split(',').map(|t| t.trim().parse().ok()).collect()
        })
    }

    fn line(&self, key: &str) -> usize {
        self.raw.entries.get(key).map_or(0, |e| e.line)
    }

    fn invalid(&self, key: &str, msg: impl std::fmt::Display) -> CliError {
        CliError::config(self.line(key), format!("`{key}`: {msg}"))
    }

    fn finish(&self) -> Result<(), CliError> {
        let used = self.used.borrow();
        for (key, e) in &self.raw.entries {
            if !used.contains(key) {
                return Err(CliError::config(e.line, format!("unknown key `{key}`")));
            }
        }
        Ok(())
    }
}

fn parse_f64(s: &str) -> Option<f64> {
    match s {
        "inf" | "infinity" => Some(f64::INFINITY),
        _ => s.parse::<f64>().ok().filter(|v| v.is_finite()),
    }
}

fn fmt_list<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

#[derive(Clone, Debug, PartialEq)]
pub enum RegularizerConfig {
    Tgv {
        alpha0: f64,
        alpha1: f64,
        coupling: Coupling,
    },
    Wavelet {
        levels: usize,
        alpha: f64,
    },
    Quadratic {
        weight: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum OperatorConfig {
    Identity,
    Convolution { kernel: Vec<f64>, kernel_dims: Vec<usize> },
    /// Random k-space lines (axis 0) covering `fraction`, or an explicit mask file.
    Fourier { fraction: f64, mask_file: Option<PathBuf> },
    Radon { angles: usize, bins: Option<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum NoiseConfig {
    None,
    /// ‖f − f†‖ = level · ‖f†‖
    Gaussian { level: f64 },
    /// Poisson counts at `count_scale` counts per data unit.
    Poisson { count_scale: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConfig {
    pub kind: DiscrepancyKind,
    pub operator: OperatorConfig,
    pub lambda: f64,
    pub background: f64,
    pub noise: NoiseConfig,
    /// Measured data (MFI1, one value per codomain entry) replacing synthetic data.
    pub data_file: Option<PathBuf>,
}

/// A slope bound checked after a rate sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    /// `data_<i>`, `bregman` or `R`.
    pub column: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatesConfig {
    pub rule: RuleKind,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub start: f64,
    pub ratio: f64,
    pub levels: usize,
    pub seeds: usize,
    pub hard_lambda: f64,
    pub gates: Vec<Gate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub schema: u32,
    pub seed: u64,
    pub grid: Grid,
    pub channels: usize,
    pub phantom: PhantomKind,
    pub regularizer: RegularizerConfig,
    pub data: Vec<ChannelConfig>,
    pub solver: SolverConfig,
    pub rates: Option<RatesConfig>,
}

pub fn rule_name(rule: RuleKind) -> &'static str {
    match rule {
        RuleKind::TwoNorm => "two_norm",
        RuleKind::MixedNKL => "mixed_nkl",
        RuleKind::General => "general",
    }
}

fn parse_rule(s: &str) -> Option<RuleKind> {
    match s {
        "two_norm" => Some(RuleKind::TwoNorm),
        "mixed_nkl" => Some(RuleKind::MixedNKL),
        "general" => Some(RuleKind::General),
        _ => None,
    }
}

fn coupling_name(c: Coupling) -> &'static str {
    match c {
        Coupling::Frobenius => "frobenius",
        Coupling::Nuclear => "nuclear",
    }
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, CliError> {
        let r = Reader::new(raw);
        let schema = r.parse("schema", "an integer", |s| s.parse::<u32>().ok())?.unwrap_or(SCHEMA_VERSION);
        if schema != SCHEMA_VERSION {
            return Err(r.invalid("schema", format!("unsupported version {schema} (expected {SCHEMA_VERSION})")));
        }
        let seed = r.u64("seed")?.unwrap_or(0);
        let dims = r.usize_list("grid.dims")?.unwrap_or_else(|| vec![32, 32]);
        let grid = match r.f64_list("grid.spacing")? {
            Some(sp) => Grid::with_spacing(&dims, &sp),
            None => Grid::new(&dims),
        }
        .map_err(|e| r.invalid(if r.has("grid.spacing") { "grid.spacing" } else { "grid.dims" }, e))?;
        let channels = r.usize("channels")?.unwrap_or(1);
        if channels == 0 {
            return Err(r.invalid("channels", "need at least one channel"));
        }
        let phantom = match r.str("phantom") {
            None => PhantomKind::SharedEdgesDisc,
            Some(name) => PhantomKind::parse(name)
                .ok_or_else(|| r.invalid("phantom", "expected affine_blocks, shared_edges_disc or smooth_bump"))?,
        };

        let regularizer = match r.str("regularizer.kind").unwrap_or("tgv") {
            "tgv" => RegularizerConfig::Tgv {
                alpha0: r.f64("regularizer.alpha0")?.unwrap_or(0.2),
                alpha1: r.f64("regularizer.alpha1")?.unwrap_or(0.1),
                coupling: match r.str("regularizer.coupling").unwrap_or("nuclear") {
                    "nuclear" => Coupling::Nuclear,
                    "frobenius" => Coupling::Frobenius,
                    _ => return Err(r.invalid("regularizer.coupling", "expected nuclear or frobenius")),
                },
            },
            "wavelet" => RegularizerConfig::Wavelet {
                levels: r.usize("regularizer.levels")?.unwrap_or(1),
                alpha: r.f64("regularizer.alpha")?.unwrap_or(0.1),
            },
            "quadratic" => RegularizerConfig::Quadratic {
                weight: r.f64("regularizer.weight")?.unwrap_or(1.0),
            },
            _ => return Err(r.invalid("regularizer.kind", "expected tgv, wavelet or quadratic")),
        };

        let mut data = Vec::new();
        for i in 1..=channels {
            let key = |k: &str| format!("channel.{i}.{k}");
            if !raw.entries.keys().any(|k| k.starts_with(&format!("channel.{i}."))) {
                continue;
            }
            data.push(Self::channel(&r, raw, &key)?);
        }
        if !data.is_empty() && data.len() != channels {
            return Err(CliError::Validation(format!(
                "{} of {channels} channels have data settings; configure all or none",
                data.len()
            )));
        }

        let defaults = SolverConfig::default();
        let solver = SolverConfig {
            max_iters: r.usize("solver.max_iters")?.unwrap_or(defaults.max_iters),
            tol: r.f64("solver.tol")?.unwrap_or(defaults.tol),
            patience: r.usize("solver.patience")?.unwrap_or(defaults.patience),
            step_policy: match r.str("solver.step_policy").unwrap_or("constant") {
                "constant" => StepPolicy::Constant,
                "adaptive" => StepPolicy::Adaptive,
                _ => return Err(r.invalid("solver.step_policy", "expected constant or adaptive")),
            },
            seed: r.u64("solver.norm_seed")?.unwrap_or(defaults.seed),
            norm_iters: r.usize("solver.norm_iters")?.unwrap_or(defaults.norm_iters),
            normalize_operators: r.bool("solver.normalize_operators")?.unwrap_or(defaults.normalize_operators),
            warm_start: r.bool("solver.warm_start")?.unwrap_or(defaults.warm_start),
            record_every: r.usize("solver.record_every")?.unwrap_or(defaults.record_every),
        };
        if solver.max_iters == 0 {
            return Err(r.invalid("solver.max_iters", "must be positive"));
        }
        if !(solver.tol >= 0.0) {
            return Err(r.invalid("solver.tol", "must be nonnegative"));
        }

        let rates = if raw.entries.keys().any(|k| k.starts_with("rates.")) {
            Some(Self::rates(&r, raw, channels)?)
        } else {
            None
        };
        r.finish()?;
        Ok(Self {
            schema,
            seed,
            grid,
            channels,
            phantom,
            regularizer,
            data,
            solver,
            rates,
        })
    }

    fn channel(r: &Reader, raw: &RawConfig, key: &dyn Fn(&str) -> String) -> Result<ChannelConfig, CliError> {
        let kind = match r.str(&key("kind")).unwrap_or("l2") {
            "l2" => DiscrepancyKind::Norm2Squared,
            "kl" => DiscrepancyKind::KullbackLeibler,
            _ => return Err(r.invalid(&key("kind"), "expected l2 or kl")),
        };
        let operator = match r.str(&key("operator")).unwrap_or("identity") {
            "identity" => OperatorConfig::Identity,
            "convolution" => {
                let kernel = r
                    .f64_list(&key("kernel"))?
                    .ok_or_else(|| r.invalid(&key("operator"), format!("convolution needs `{}`", key("kernel"))))?;
                let kernel_dims = match r.usize_list(&key("kernel_dims"))? {
                    Some(d) => d,
                    None => vec![kernel.len()],
                };
                OperatorConfig::Convolution { kernel, kernel_dims }
            }
            "fourier" => OperatorConfig::Fourier {
                fraction: r.f64(&key("mask_fraction"))?.unwrap_or(0.25),
                mask_file: r.str(&key("mask_file")).map(|p| raw.resolve_path(p)),
            },
            "radon" => OperatorConfig::Radon {
                angles: r.usize(&key("angles"))?.unwrap_or(12),
                bins: r.usize(&key("bins"))?,
            },
            _ => {
                return Err(r.invalid(&key("operator"), "expected identity, convolution, fourier or radon"));
            }
        };
        let lambda = r.f64(&key("lambda"))?.unwrap_or(1.0);
        if !(lambda > 0.0) {
            return Err(r.invalid(&key("lambda"), "must be positive"));
        }
        let background = r.f64(&key("background"))?.unwrap_or(0.0);
        if !(background >= 0.0) {
            return Err(r.invalid(&key("background"), "must be nonnegative"));
        }
        let noise = match r.str(&key("noise")).unwrap_or("none") {
            "none" => NoiseConfig::None,
            "gaussian" => NoiseConfig::Gaussian {
                level: r.f64(&key("noise_level"))?.unwrap_or(0.05),
            },
            "poisson" => NoiseConfig::Poisson {
                count_scale: r.f64(&key("count_scale"))?.unwrap_or(20.0),
            },
            _ => return Err(r.invalid(&key("noise"), "expected none, gaussian or poisson")),
        };
        let data_file = r.str(&key("data")).map(|p| raw.resolve_path(p));
        if let Some(p) = &data_file {
            if !p.is_file() {
                return Err(r.invalid(&key("data"), format!("file {} not found", p.display())));
            }
        }
        if let OperatorConfig::Fourier { mask_file: Some(p), .. } = &operator {
            if !p.is_file() {
                return Err(r.invalid(&key("mask_file"), format!("file {} not found", p.display())));
            }
        }
        Ok(ChannelConfig {
            kind,
            operator,
            lambda,
            background,
            noise,
            data_file,
        })
    }

    fn rates(r: &Reader, raw: &RawConfig, channels: usize) -> Result<RatesConfig, CliError> {
        let rule = match r.str("rates.rule") {
            None => RuleKind::TwoNorm,
            Some(s) => parse_rule(s).ok_or_else(|| r.invalid("rates.rule", "expected two_norm, mixed_nkl or general"))?,
        };
        let mu = r.f64_list("rates.mu")?.unwrap_or_else(|| vec![1.0; channels]);
        if mu.len() != channels {
            return Err(r.invalid("rates.mu", format!("need {channels} values")));
        }
        let nu = r.f64_list("rates.nu")?.unwrap_or_default();
        let start = r.f64("rates.start")?.unwrap_or(0.1);
        let ratio = r.f64("rates.ratio")?.unwrap_or(0.5);
        if !(start > 0.0) {
            return Err(r.invalid("rates.start", "must be positive"));
        }
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(r.invalid("rates.ratio", "must lie in (0, 1)"));
        }
        let levels = r.usize("rates.levels")?.unwrap_or(8);
        if levels < 3 {
            return Err(r.invalid("rates.levels", "need at least 3 levels"));
        }
        let seeds = r.usize("rates.seeds")?.unwrap_or(1);
        if seeds == 0 {
            return Err(r.invalid("rates.seeds", "need at least one seed"));
        }
        let hard_lambda = r.f64("rates.hard_lambda")?.unwrap_or(1e8);
        let mut gates = Vec::new();
        let gate_keys: Vec<String> = raw.entries.keys().filter(|k| k.starts_with("rates.gate.")).cloned().collect();
        for k in gate_keys {
            let column = k["rates.gate.".len()..].to_string();
            let valid_column = column == "bregman"
                || column == "r"
                || column
                    .strip_prefix("data_")
                    .and_then(|i| i.parse::<usize>().ok())
                    .is_some_and(|i| (1..=channels).contains(&i));
            if !valid_column {
                return Err(r.invalid(&k, "gate column must be data_<i>, bregman or r"));
            }
            let bounds = r.f64_list(&k)?.unwrap_or_default();
            let (min, max) = match bounds[..] {
                [lo] => (lo, f64::INFINITY),
                [lo, hi] if lo <= hi => (lo, hi),
                _ => return Err(r.invalid(&k, "expected `min` or `min, max`")),
            };
            gates.push(Gate { column, min, max });
        }
        Ok(RatesConfig {
            rule,
            mu,
            nu,
            start,
            ratio,
            levels,
            seeds,
            hard_lambda,
            gates,
        })
    }

    /// Fully resolved configuration, including defaults, in the input syntax.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "schema = {}", self.schema);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "grid.dims = {}", fmt_list(self.grid.dims()));
        let _ = writeln!(s, "grid.spacing = {}", fmt_list(self.grid.spacing()));
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "phantom = {}", self.phantom.name());
        match &self.regularizer {
            RegularizerConfig::Tgv {
                alpha0,
                alpha1,
                coupling,
            } => {
                let _ = writeln!(s, "regularizer.kind = tgv");
                let _ = writeln!(s, "regularizer.alpha0 = {alpha0}");
                let _ = writeln!(s, "regularizer.alpha1 = {alpha1}");
                let _ = writeln!(s, "regularizer.coupling = {}", coupling_name(*coupling));
            }
            RegularizerConfig::Wavelet { levels, alpha } => {
                let _ = writeln!(s, "regularizer.kind = wavelet");
                let _ = writeln!(s, "regularizer.levels = {levels}");
                let _ = writeln!(s, "regularizer.alpha = {alpha}");
            }
            RegularizerConfig::Quadratic { weight } => {
                let _ = writeln!(s, "regularizer.kind = quadratic");
                let _ = writeln!(s, "regularizer.weight = {weight}");
            }
        }
        for (k, ch) in self.data.iter().enumerate() {
            let p = format!("channel.{}", k + 1);
            let _ = writeln!(s, "{p}.kind = {}", ch.kind.name());
            match &ch.operator {
                OperatorConfig::Identity => {
                    let _ = writeln!(s, "{p}.operator = identity");
                }
                OperatorConfig::Convolution { kernel, kernel_dims } => {
                    let _ = writeln!(s, "{p}.operator = convolution");
                    let _ = writeln!(s, "{p}.kernel = {}", fmt_list(kernel));
                    let _ = writeln!(s, "{p}.kernel_dims = {}", fmt_list(kernel_dims));
                }
                OperatorConfig::Fourier { fraction, mask_file } => {
                    let _ = writeln!(s, "{p}.operator = fourier");
                    match mask_file {
                        Some(f) => {
                            let _ = writeln!(s, "{p}.mask_file = {}", f.display());
                        }
                        None => {
                            let _ = writeln!(s, "{p}.mask_fraction = {fraction}");
                        }
                    }
                }
                OperatorConfig::Radon { angles, bins } => {
                    let _ = writeln!(s, "{p}.operator = radon");
                    let _ = writeln!(s, "{p}.angles = {angles}");
                    if let Some(bins) = bins {
                        let _ = writeln!(s, "{p}.bins = {bins}");
                    }
                }
            }
            let _ = writeln!(s, "{p}.lambda = {}", ch.lambda);
            if ch.kind == DiscrepancyKind::KullbackLeibler {
                let _ = writeln!(s, "{p}.background = {}", ch.background);
            }
            match &ch.data_file {
                Some(f) => {
                    let _ = writeln!(s, "{p}.data = {}", f.display());
                }
                None => match ch.noise {
                    NoiseConfig::None => {
                        let _ = writeln!(s, "{p}.noise = none");
                    }
                    NoiseConfig::Gaussian { level } => {
                        let _ = writeln!(s, "{p}.noise = gaussian");
                        let _ = writeln!(s, "{p}.noise_level = {level}");
                    }
                    NoiseConfig::Poisson { count_scale } => {
                        let _ = writeln!(s, "{p}.noise = poisson");
                        let _ = writeln!(s, "{p}.count_scale = {count_scale}");
                    }
                },
            }
        }
        let sv = &self.solver;
        let _ = writeln!(s, "solver.max_iters = {}", sv.max_iters);
        let _ = writeln!(s, "solver.tol = {:e}", sv.tol);
        let _ = writeln!(s, "solver.patience = {}", sv.patience);
        let policy = match sv.step_policy {
            StepPolicy::Constant => "constant",
            StepPolicy::Adaptive => "adaptive",
        };
        let _ = writeln!(s, "solver.step_policy = {policy}");
        let _ = writeln!(s, "solver.norm_seed = {}", sv.seed);
        let _ = writeln!(s, "solver.norm_iters = {}", sv.norm_iters);
        let _ = writeln!(s, "solver.normalize_operators = {}", sv.normalize_operators);
        let _ = writeln!(s, "solver.warm_start = {}", sv.warm_start);
        let _ = writeln!(s, "solver.record_every = {}", sv.record_every);
        if let Some(rc) = &self.rates {
            let _ = writeln!(s, "rates.rule = {}", rule_name(rc.rule));
            let _ = writeln!(s, "rates.mu = {}", fmt_list(&rc.mu));
            if !rc.nu.is_empty() {
                let _ = writeln!(s, "rates.nu = {}", fmt_list(&rc.nu));
            }
            let _ = writeln!(s, "rates.start = {}", rc.start);
            let _ = writeln!(s, "rates.ratio = {}", rc.ratio);
            let _ = writeln!(s, "rates.levels = {}", rc.levels);
            let _ = writeln!(s, "rates.seeds = {}", rc.seeds);
            let _ = writeln!(s, "rates.hard_lambda = {:e}", rc.hard_lambda);
            for g in &rc.gates {
                if g.max.is_finite() {
                    let _ = writeln!(s, "rates.gate.{} = {}, {}", g.column, g.min, g.max);
                } else {
                    let _ = writeln!(s, "rates.gate.{} = {}", g.column, g.min);
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(text: &str) -> Result<RunConfig, CliError> {
        RunConfig::from_raw(&RawConfig::parse(text)?)
    }

    fn error_line(err: CliError) -> usize {
        match err {
            CliError::Config { line, .. } => line,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn defaults_resolve() {
        let cfg = resolve("").unwrap();
        assert_eq!(cfg.grid.dims(), &[32, 32]);
        assert_eq!(cfg.channels, 1);
        assert!(cfg.data.is_empty());
        assert!(cfg.rates.is_none());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert_eq!(error_line(RawConfig::parse("seed = 1\n\nno equals sign\n").unwrap_err()), 3);
        assert_eq!(error_line(RawConfig::parse("seed = 1\nseed = 2\n").unwrap_err()), 2);
        assert_eq!(error_line(RawConfig::parse("a..b = 1\n").unwrap_err()), 1);
        assert_eq!(error_line(resolve("# c\nchannels = 1\nsolver.tol = abc\n").unwrap_err()), 3);
        assert_eq!(error_line(resolve("channels = 1\nsolver.tolerance = 1e-6\n").unwrap_err()), 2);
        assert_eq!(error_line(resolve("\nschema = 7\n").unwrap_err()), 2);
        assert_eq!(
            error_line(resolve("channels = 1\nchannel.1.kind = poisson\n").unwrap_err()),
            2
        );
    }

    #[test]
    fn channels_must_be_all_or_none() {
        let err = resolve("channels = 2\nchannel.1.kind = l2\n").unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
    }

    #[test]
    fn missing_data_file_is_rejected() {
        let err = resolve("channel.1.data = /nonexistent/f.mfi\n").unwrap_err();
        assert_eq!(error_line(err), 1);
    }

    #[test]
    fn render_roundtrips() {
        let text = "\
seed = 4
grid.dims = 16, 12
channels = 2
phantom = smooth_bump
regularizer.kind = quadratic
regularizer.weight = 0.1
channel.1.kind = l2
channel.1.operator = convolution
channel.1.kernel = 0.25, 0.5, 0.25
channel.1.kernel_dims = 3, 1
channel.1.lambda = inf
channel.2.kind = kl
channel.2.operator = radon
channel.2.angles = 6
channel.2.background = 0.1
channel.2.noise = poisson
channel.2.count_scale = 50
rates.rule = mixed_nkl
rates.mu = 1, 2
rates.gate.data_2 = 1.7
rates.gate.bregman = 0.85, 1.2
";
        let cfg = resolve(text).unwrap();
        assert_eq!(cfg.data[0].lambda, f64::INFINITY);
        let again = resolve(&cfg.render()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.render(), cfg.render());
    }

    #[test]
    fn comments_and_case_are_ignored() {
        let cfg = resolve("Seed = 9   # trailing\n# full line\n  grid.dims=8,8\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.grid.dims(), &[8, 8]);
    }

    #[test]
    fn gate_columns_are_checked() {
        assert!(resolve("rates.gate.data_3 = 1\n").is_err());
        assert!(resolve("rates.gate.bregman = 2, 1\n").is_err());
        let cfg = resolve("rates.gate.r = 0.5\n").unwrap();
        assert_eq!(cfg.rates.unwrap().gates[0].max, f64::INFINITY);
    }
}
