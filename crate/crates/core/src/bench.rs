//! Monte-Carlo experiments: per-method estimation, estimate-to-truth
//! matching and the bias / standard deviation / RMSE / resolution metrics.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    crb_rms, l21_solve, local_peaks, music_spectrum, root_music, spice_oversampled, spice_undersampled,
    stochastic_crb, L21_TOL,
};
use crate::error::{Error, Result};
use crate::gridless::{anm_sdp, check_anm_equivalence, decompose, gl_sparrow, ToeplitzParam, DEFAULT_RANK_TOL};
pub use crate::model::wrap_distance;
use crate::model::{
    sample_covariance, simulate_trial, trial_rng, uniform_grid, wrap_frequency, ArrayGeometry, MmvBatch, SourceScene,
};
use crate::sparrow::{
    reconstruct_signal, row_norms, select_lambda, sparrow_cd, sparrow_sdp, sparrow_sdp_covariance, CdOptions, Dictionary,
    DEFAULT_SUPPORT_THRESHOLD,
};

pub const SCHEMA_VERSION: u32 = 1;
/// Largest source count the exact assignment accepts.
pub const MAX_SOURCES: usize = 16;
const PAD_SALT: u64 = 0x5bd1_e995_9e37_79b9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SparrowCd,
    SparrowSdp,
    GlSparrow,
    Anm,
    L21,
    Music,
    RootMusic,
    SpiceUs,
    SpiceOs,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::SparrowCd,
        Method::SparrowSdp,
        Method::GlSparrow,
        Method::Anm,
        Method::L21,
        Method::Music,
        Method::RootMusic,
        Method::SpiceUs,
        Method::SpiceOs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SparrowCd => "sparrow-cd",
            Method::SparrowSdp => "sparrow-sdp",
            Method::GlSparrow => "gl-sparrow",
            Method::Anm => "anm",
            Method::L21 => "l21",
            Method::Music => "music",
            Method::RootMusic => "root-music",
            Method::SpiceUs => "spice-us",
            Method::SpiceOs => "spice-os",
        }
    }

    pub fn needs_lambda(self) -> bool {
        matches!(self, Method::SparrowCd | Method::SparrowSdp | Method::GlSparrow | Method::Anm | Method::L21)
    }

    pub fn needs_order(self) -> bool {
        matches!(self, Method::Music | Method::RootMusic)
    }

    pub fn is_gridless(self) -> bool {
        matches!(self, Method::GlSparrow | Method::Anm | Method::RootMusic)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::InvalidInput(format!("unknown method '{s}'; valid methods: {}", valid.join(", ")))
        })
    }
}

/// What a method needs besides the data.
#[derive(Debug, Clone)]
pub struct MethodContext {
    pub geometry: ArrayGeometry,
    /// Grid dictionary for the grid-based methods.
    pub dictionary: Option<Dictionary>,
    pub lambda: Option<f64>,
    /// Known number of sources, for the subspace methods.
    pub sources: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub frequencies: Vec<f64>,
    /// Row norms, atom magnitudes, powers or pseudo-spectrum values, per frequency.
    pub magnitudes: Vec<f64>,
    pub model_order: usize,
    pub objective: Option<f64>,
    pub low_confidence: bool,
}

/// Local maxima of a grid profile above `DEFAULT_SUPPORT_THRESHOLD * max`, strongest first.
pub fn grid_estimate(values: &[f64], grid: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let top = values.iter().cloned().fold(0.0, f64::max);
    if top <= 0.0 {
        return (vec![], vec![]);
    }
    local_peaks(values, values.len())
        .into_iter()
        .filter(|&k| values[k] > DEFAULT_SUPPORT_THRESHOLD * top)
        .map(|k| (grid[k], values[k]))
        .unzip()
}

fn require<T: Clone>(v: &Option<T>, what: &str, method: Method) -> Result<T> {
    v.clone().ok_or_else(|| Error::InvalidInput(format!("method {method} needs {what}")))
}

fn from_grid(values: &[f64], d: &Dictionary, objective: Option<f64>) -> Estimate {
    let (frequencies, magnitudes) = grid_estimate(values, d.grid.points());
    Estimate { model_order: frequencies.len(), frequencies, magnitudes, objective, low_confidence: false }
}

fn from_toeplitz(u: &ToeplitzParam, objective: f64) -> Result<Estimate> {
    let d = decompose(u, DEFAULT_RANK_TOL)?;
    Ok(Estimate {
        model_order: d.rank,
        frequencies: d.frequencies,
        magnitudes: d.magnitudes,
        objective: Some(objective),
        low_confidence: false,
    })
}

/// Runs one method on one batch.
pub fn estimate(method: Method, y: &MmvBatch, ctx: &MethodContext) -> Result<Estimate> {
    if y.sensors() != ctx.geometry.sensors() {
        return Err(Error::InvalidInput("data rows do not match the array".into()));
    }
    let dict = || {
        ctx.dictionary
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("method {method} needs a frequency grid")))
    };
    match method {
        Method::SparrowCd => {
            let d = dict()?;
            let sol = sparrow_cd(d, &sample_covariance(y), require(&ctx.lambda, "lambda", method)?, &CdOptions::default())?;
            Ok(from_grid(&sol.s, d, Some(sol.objective)))
        }
        Method::SparrowSdp => {
            let d = dict()?;
            let sol = sparrow_sdp(d, y, require(&ctx.lambda, "lambda", method)?)?;
            Ok(from_grid(&sol.s, d, Some(sol.objective)))
        }
        Method::L21 => {
            let d = dict()?;
            let sol = l21_solve(d, y, require(&ctx.lambda, "lambda", method)?, L21_TOL)?;
            Ok(from_grid(&row_norms(&sol.x), d, Some(sol.objective)))
        }
        Method::GlSparrow => {
            let sol = gl_sparrow(&ctx.geometry, y, require(&ctx.lambda, "lambda", method)?)?;
            from_toeplitz(&sol.u, sol.objective)
        }
        Method::Anm => {
            let sol = anm_sdp(&ctx.geometry, y, require(&ctx.lambda, "lambda", method)?)?;
            let rn = (y.snapshots() as f64).sqrt();
            let u = ToeplitzParam::new(sol.v.u.iter().map(|z| z / rn).collect())?;
            from_toeplitz(&u, sol.objective)
        }
        Method::Music => {
            let d = dict()?;
            let l = require(&ctx.sources, "the number of sources", method)?;
            let spec = music_spectrum(&sample_covariance(y), l, &d.grid, &ctx.geometry)?;
            let magnitudes = spec.peak_indices.iter().map(|&k| spec.spectrum[k]).collect();
            Ok(Estimate {
                model_order: spec.peaks.len(),
                frequencies: spec.peaks,
                magnitudes,
                objective: None,
                low_confidence: false,
            })
        }
        Method::RootMusic => {
            let l = require(&ctx.sources, "the number of sources", method)?;
            let est = root_music(&sample_covariance(y), l, &ctx.geometry)?;
            Ok(Estimate {
                model_order: est.frequencies.len(),
                magnitudes: vec![1.0; est.frequencies.len()],
                frequencies: est.frequencies,
                objective: None,
                low_confidence: est.low_confidence,
            })
        }
        Method::SpiceUs | Method::SpiceOs => {
            let d = dict()?;
            let r = sample_covariance(y);
            let sol = if method == Method::SpiceUs { spice_undersampled(d, &r)? } else { spice_oversampled(d, &r)? };
            Ok(from_grid(&sol.p, d, Some(sol.objective)))
        }
    }
}

/// Optimal pairing of estimates to truths under wrap distance.
///
/// With more estimates than truths the strongest ones are kept; with fewer,
/// uniform random frequencies from `rng` fill the gap. Returns the estimate
/// assigned to each truth, in truth order.
pub fn match_estimates<R: Rng>(truth: &[f64], est: &[f64], mags: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let l = truth.len();
    if l > MAX_SOURCES {
        return Err(Error::Unsupported(format!("matching more than {MAX_SOURCES} sources")));
    }
    if est.len() != mags.len() {
        return Err(Error::InvalidInput("estimates and magnitudes differ in length".into()));
    }
    let mut order: Vec<usize> = (0..est.len()).collect();
    order.sort_by(|&a, &b| mags[b].total_cmp(&mags[a]).then(a.cmp(&b)));
    let mut cand: Vec<f64> = order.iter().take(l).map(|&i| est[i]).collect();
    while cand.len() < l {
        cand.push(rng.random_range(-1.0..1.0));
    }
    // dp[mask]: best cost assigning truths 0..popcount(mask) to the estimates in mask.
    let full = 1usize << l;
    let mut dp = vec![f64::INFINITY; full];
    let mut choice = vec![usize::MAX; full];
    dp[0] = 0.0;
    for mask in 0..full {
        if !dp[mask].is_finite() {
            continue;
        }
        let t = mask.count_ones() as usize;
        if t == l {
            continue;
        }
        for (j, &c) in cand.iter().enumerate() {
            if mask & (1 << j) == 0 {
                let next = mask | (1 << j);
                let cost = dp[mask] + wrap_distance(truth[t], c);
                if cost < dp[next] {
                    dp[next] = cost;
                    choice[next] = j;
                }
            }
        }
    }
    let mut out = vec![0.0; l];
    let mut mask = full - 1;
    for t in (0..l).rev() {
        let j = choice[mask];
        out[t] = cand[j];
        mask &= !(1 << j);
    }
    Ok(out)
}

fn check_trials(trials: &[Vec<f64>], truth: &[f64]) -> Result<()> {
    if trials.is_empty() {
        return Err(Error::InvalidInput("metrics need at least one trial".into()));
    }
    if trials.iter().any(|t| t.len() != truth.len()) || truth.is_empty() {
        return Err(Error::InvalidInput("each trial needs one estimate per source".into()));
    }
    Ok(())
}

/// Signed wrap-around deviations `wrap(est - truth)` per trial and source.
fn deviations(trials: &[Vec<f64>], truth: &[f64]) -> Vec<Vec<f64>> {
    trials
        .iter()
        .map(|t| t.iter().zip(truth).map(|(e, mu)| wrap_frequency(e - mu)).collect())
        .collect()
}

fn mean_deviation(dev: &[Vec<f64>], l: usize) -> Vec<f64> {
    let t = dev.len() as f64;
    (0..l).map(|i| dev.iter().map(|d| d[i]).sum::<f64>() / t).collect()
}

/// `sqrt(sum_l (mu_l - mean_t mu_l(t))^2 / L)`, with the mean taken on the
/// circle unwrapped around `mu_l`.
pub fn bias(trials: &[Vec<f64>], truth: &[f64]) -> Result<f64> {
    check_trials(trials, truth)?;
    let m = mean_deviation(&deviations(trials, truth), truth.len());
    Ok((m.iter().map(|v| v * v).sum::<f64>() / truth.len() as f64).sqrt())
}

/// `sqrt(sum_l sum_t |mean_l - mu_l(t)|_wa^2 / (T L))`.
pub fn std_wa(trials: &[Vec<f64>], truth: &[f64]) -> Result<f64> {
    check_trials(trials, truth)?;
    let dev = deviations(trials, truth);
    let m = mean_deviation(&dev, truth.len());
    let total: f64 = dev.iter().flat_map(|d| d.iter().zip(&m).map(|(x, mu)| wrap_frequency(x - mu).powi(2))).sum();
    Ok((total / (trials.len() * truth.len()) as f64).sqrt())
}

/// `sqrt(sum_t sum_l |mu_l - mu_l(t)|_wa^2 / (L T))`.
pub fn rmse(trials: &[Vec<f64>], truth: &[f64]) -> Result<f64> {
    check_trials(trials, truth)?;
    let total: f64 = trials.iter().flat_map(|t| t.iter().zip(truth).map(|(e, mu)| wrap_distance(*e, *mu).powi(2))).sum();
    Ok((total / (trials.len() * truth.len()) as f64).sqrt())
}

/// Whether matched estimates resolve two sources: `sum_l |mu_l - est_l|_wa <= |mu_1 - mu_2|_wa`.
pub fn is_resolved(est: &[f64], truth: &[f64]) -> Result<bool> {
    if truth.len() != 2 || est.len() != 2 {
        return Err(Error::Unsupported("resolution is defined for two sources".into()));
    }
    let err = wrap_distance(est[0], truth[0]) + wrap_distance(est[1], truth[1]);
    Ok(err <= wrap_distance(truth[0], truth[1]))
}

/// Fraction of trials that resolve both sources.
pub fn resolution_fraction(trials: &[Vec<f64>], truth: &[f64]) -> Result<f64> {
    check_trials(trials, truth)?;
    let mut hits = 0usize;
    for t in trials {
        hits += usize::from(is_resolved(t, truth)?);
    }
    Ok(hits as f64 / trials.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArraySpec {
    /// Uniform linear array with this many sensors at half-wavelength spacing.
    Ula(usize),
    /// Sensor positions in half-wavelength units.
    Positions(Vec<f64>),
}

impl ArraySpec {
    pub fn sensors(&self) -> usize {
        match self {
            ArraySpec::Ula(m) => *m,
            ArraySpec::Positions(p) => p.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    /// Number of snapshots `N`.
    Snapshots,
    /// Source separation: `mu_2 = mu_1 - value` with `mu_1 = frequencies[0]`.
    Separation,
    /// SNR in dB.
    Snr,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::Snapshots => "snapshots",
            SweepVariable::Separation => "separation",
            SweepVariable::Snr => "snr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

/// `"auto"` applies `sqrt(sigma^2 M ln M)` with the true noise power; a number fixes lambda.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LambdaRule {
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for LambdaRule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LambdaRule::Auto => s.serialize_str("auto"),
            LambdaRule::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for LambdaRule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Word(String),
            Value(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Word(w) if w == "auto" => Ok(LambdaRule::Auto),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("lambda must be \"auto\" or a number, got \"{w}\""))),
            Raw::Value(v) => Ok(LambdaRule::Fixed(v)),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub array: ArraySpec,
    /// Source frequencies; the separation sweep uses only the first.
    pub frequencies: Vec<f64>,
    pub snr_db: f64,
    pub snapshots: usize,
    pub grid_size: usize,
    pub trials: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub lambda: LambdaRule,
    pub sweep: Sweep,
    /// Record wall-clock times; off makes reports byte-reproducible.
    #[serde(default = "default_true")]
    pub timing: bool,
}

impl ExperimentConfig {
    /// Every violated constraint, one message each.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = vec![];
        if self.schema_version != SCHEMA_VERSION {
            errs.push(format!("schema_version must be {SCHEMA_VERSION}, got {}", self.schema_version));
        }
        let m = self.array.sensors();
        if m < 2 {
            errs.push("array must have at least 2 sensors".into());
        }
        if self.trials == 0 {
            errs.push("trials must be at least 1".into());
        }
        if self.snapshots == 0 {
            errs.push("snapshots must be at least 1".into());
        }
        if self.grid_size == 0 {
            errs.push("grid_size must be at least 1".into());
        }
        if self.methods.is_empty() {
            errs.push("methods must not be empty".into());
        }
        if !self.snr_db.is_finite() {
            errs.push("snr_db must be finite".into());
        }
        match self.geometry() {
            Err(e) => errs.push(format!("array: {e}")),
            Ok(g) => {
                let ula_only: Vec<&str> = self.methods.iter().filter(|x| x.is_gridless()).map(|x| x.name()).collect();
                if !g.is_ula() && !ula_only.is_empty() {
                    errs.push(format!("{} require a uniform linear array", ula_only.join(", ")));
                }
            }
        }
        if let LambdaRule::Fixed(v) = self.lambda {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("lambda must be positive, got {v}"));
            }
        }
        let l = match self.sweep.variable {
            SweepVariable::Separation => 2,
            _ => self.frequencies.len(),
        };
        if self.frequencies.is_empty() {
            errs.push("frequencies must not be empty".into());
        }
        if self.sweep.variable == SweepVariable::Separation && self.frequencies.len() != 1 && self.frequencies.len() != 2 {
            errs.push("separation sweep takes one or two frequencies (only the first is used)".into());
        }
        if self.frequencies.iter().any(|f| !f.is_finite()) {
            errs.push("frequencies must be finite".into());
        }
        if l > MAX_SOURCES {
            errs.push(format!("at most {MAX_SOURCES} sources are supported"));
        }
        if l >= m && self.methods.iter().any(|x| x.needs_order()) {
            errs.push(format!("subspace methods need fewer sources ({l}) than sensors ({m})"));
        }
        if self.sweep.values.is_empty() {
            errs.push("sweep values must not be empty".into());
        }
        for &v in &self.sweep.values {
            match self.sweep.variable {
                SweepVariable::Snapshots if !(v >= 1.0 && v.fract() == 0.0) => {
                    errs.push(format!("snapshot sweep value {v} is not a positive integer"))
                }
                SweepVariable::Separation if !(v > 0.0 && v <= 1.0) => {
                    errs.push(format!("separation {v} must lie in (0, 1]"))
                }
                SweepVariable::Snr if !v.is_finite() => errs.push(format!("SNR value {v} is not finite")),
                _ => {}
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(errs.join("; ")))
        }
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        match &self.array {
            ArraySpec::Ula(m) => ArrayGeometry::ula(*m),
            ArraySpec::Positions(p) => ArrayGeometry::new(p.clone()),
        }
    }

    /// Scene, snapshot count and noise power at one sweep value.
    pub fn point(&self, value: f64) -> Result<(SourceScene, usize, f64)> {
        let mut freqs = self.frequencies.clone();
        let mut n = self.snapshots;
        let mut snr = self.snr_db;
        match self.sweep.variable {
            SweepVariable::Snapshots => n = value as usize,
            SweepVariable::Separation => freqs = vec![freqs[0], wrap_frequency(freqs[0] - value)],
            SweepVariable::Snr => snr = value,
        }
        Ok((SourceScene::unit_power(&freqs), n, 10f64.powf(-snr / 10.0)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub method: Method,
    pub sweep_value: f64,
    pub trial: usize,
    /// Matched estimate per source, in truth order; empty on failure.
    pub estimates: Vec<f64>,
    pub wall_ms: f64,
    #[serde(flatten)]
    pub status: TrialStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub sweep_value: f64,
    /// `None` when every trial failed.
    pub bias: Option<f64>,
    pub std: Option<f64>,
    pub rmse: Option<f64>,
    /// Only defined for two sources.
    pub resolution: Option<f64>,
    pub mean_ms: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub sweep_value: f64,
    /// Per-frequency RMS stochastic CRB.
    pub crb: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub summary: Vec<SummaryRow>,
    pub bounds: Vec<BoundRow>,
    pub trials: Vec<TrialRecord>,
}

fn stream(point: usize, trial: usize) -> u64 {
    ((point as u64) << 32) | trial as u64
}

fn run_trial(
    cfg: &ExperimentConfig,
    g: &ArrayGeometry,
    dict: &Option<Dictionary>,
    point: usize,
    value: f64,
    trial: usize,
) -> Result<Vec<TrialRecord>> {
    let (scene, n, noise) = cfg.point(value)?;
    let y = simulate_trial(g, &scene, n, noise, cfg.seed, stream(point, trial))?;
    let lambda = match cfg.lambda {
        LambdaRule::Auto => select_lambda(noise, g.sensors()),
        LambdaRule::Fixed(v) => v,
    };
    let ctx = MethodContext { geometry: g.clone(), dictionary: dict.clone(), lambda: Some(lambda), sources: Some(scene.len()) };
    let mut out = vec![];
    for (mi, &method) in cfg.methods.iter().enumerate() {
        let start = Instant::now();
        let res = estimate(method, &y, &ctx);
        let wall_ms = if cfg.timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        let mut pad = trial_rng(cfg.seed ^ PAD_SALT.wrapping_mul(mi as u64 + 1), stream(point, trial));
        let rec = match res.and_then(|e| match_estimates(&scene.frequencies, &e.frequencies, &e.magnitudes, &mut pad)) {
            Ok(estimates) => TrialRecord { method, sweep_value: value, trial, estimates, wall_ms, status: TrialStatus::Ok },
            Err(e) => TrialRecord {
                method,
                sweep_value: value,
                trial,
                estimates: vec![],
                wall_ms,
                status: TrialStatus::Failed { reason: e.to_string() },
            },
        };
        out.push(rec);
    }
    Ok(out)
}

/// Simulates, estimates, matches and aggregates every (sweep value, trial,
/// method). Deterministic given the seed; trials may run concurrently.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let g = cfg.geometry()?;
    let needs_grid = cfg.methods.iter().any(|m| !m.is_gridless());
    let dict = if needs_grid { Some(Dictionary::new(g.clone(), uniform_grid(cfg.grid_size)?)) } else { None };
    let jobs: Vec<(usize, f64, usize)> = cfg
        .sweep
        .values
        .iter()
        .enumerate()
        .flat_map(|(p, &v)| (0..cfg.trials).map(move |t| (p, v, t)))
        .collect();
    let per_trial: Vec<Vec<TrialRecord>> =
        jobs.par_iter().map(|&(p, v, t)| run_trial(cfg, &g, &dict, p, v, t)).collect::<Result<_>>()?;

    let mut summary = vec![];
    let mut bounds = vec![];
    for &value in &cfg.sweep.values {
        let (scene, n, noise) = cfg.point(value)?;
        let crb = stochastic_crb(&scene, noise, n, &g).ok().map(|c| crb_rms(&c));
        bounds.push(BoundRow { sweep_value: value, crb });
        for &method in &cfg.methods {
            let recs: Vec<&TrialRecord> =
                per_trial.iter().flatten().filter(|r| r.method == method && r.sweep_value == value).collect();
            let ok: Vec<Vec<f64>> =
                recs.iter().filter(|r| r.status == TrialStatus::Ok).map(|r| r.estimates.clone()).collect();
            let truth = &scene.frequencies;
            let metric = |f: fn(&[Vec<f64>], &[f64]) -> Result<f64>| if ok.is_empty() { None } else { f(&ok, truth).ok() };
            summary.push(SummaryRow {
                method,
                sweep_value: value,
                bias: metric(bias),
                std: metric(std_wa),
                rmse: metric(rmse),
                resolution: if truth.len() == 2 { metric(resolution_fraction) } else { None },
                mean_ms: recs.iter().map(|r| r.wall_ms).sum::<f64>() / recs.len() as f64,
                failures: recs.len() - ok.len(),
            });
        }
    }
    Ok(MetricsReport { config: cfg.clone(), summary, bounds, trials: per_trial.into_iter().flatten().collect() })
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("CSV output: {e}"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Columns: method, sweep_var, sweep_value, trial, freq_index, estimate, wall_ms, status.
pub fn write_trials_csv<W: Write>(report: &MetricsReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "sweep_var", "sweep_value", "trial", "freq_index", "estimate", "wall_ms", "status"])
        .map_err(csv_err)?;
    let var = report.config.sweep.variable.name();
    for r in &report.trials {
        let status = match &r.status {
            TrialStatus::Ok => "ok".to_string(),
            TrialStatus::Failed { reason } => format!("failed: {reason}"),
        };
        let rows: Vec<(String, String)> = if r.estimates.is_empty() {
            vec![(String::new(), String::new())]
        } else {
            r.estimates.iter().enumerate().map(|(i, e)| (i.to_string(), e.to_string())).collect()
        };
        for (idx, est) in rows {
            out.write_record([
                r.method.name(),
                var,
                &r.sweep_value.to_string(),
                &r.trial.to_string(),
                &idx,
                &est,
                &r.wall_ms.to_string(),
                &status,
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush().map_err(|e| Error::InvalidInput(format!("CSV output: {e}")))
}

/// Columns: method, sweep_value, bias, std, rmse, resolution, mean_ms, failures.
pub fn write_summary_csv<W: Write>(report: &MetricsReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "sweep_value", "bias", "std", "rmse", "resolution", "mean_ms", "failures"])
        .map_err(csv_err)?;
    for s in &report.summary {
        out.write_record([
            s.method.name(),
            &s.sweep_value.to_string(),
            &opt(s.bias),
            &opt(s.std),
            &opt(s.rmse),
            &opt(s.resolution),
            &s.mean_ms.to_string(),
            &s.failures.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::InvalidInput(format!("CSV output: {e}")))
}

/// Acceptance thresholds of the equivalence audits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// `max_k |s_k - ||x_k|| / sqrt(N)|`.
    pub row_norm: f64,
    /// Relative Frobenius distance of the reconstructed signal.
    pub signal: f64,
    /// `||u - v / sqrt(N)||_inf`.
    pub toeplitz: f64,
    pub frequency: f64,
    /// Relative objective deviation.
    pub objective: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { row_norm: 1e-4, signal: 1e-3, toeplitz: 1e-5, frequency: 1e-6, objective: 1e-6 }
    }
}

impl Tolerances {
    pub fn uniform(tol: f64) -> Self {
        Self { row_norm: tol, signal: tol, toeplitz: tol, frequency: tol, objective: tol }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub trials: usize,
    pub sensors: usize,
    pub grid_size: usize,
    /// Snapshot counts, cycled over the instances.
    pub max_snapshots: usize,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self { trials: 50, sensors: 6, grid_size: 24, max_snapshots: 10, seed: 1 }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = vec![];
        if self.trials == 0 {
            errs.push("trials must be at least 1");
        }
        if self.sensors < 2 {
            errs.push("sensors must be at least 2");
        }
        if self.grid_size == 0 {
            errs.push("grid_size must be at least 1");
        }
        if self.max_snapshots == 0 {
            errs.push("max_snapshots must be at least 1");
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(errs.join("; ")))
        }
    }
}

/// Worst-case deviations between the row-norm solvers and the mixed-norm oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L21Audit {
    pub instances: usize,
    pub max_row_norm_deviation_cd: f64,
    pub max_row_norm_deviation_sdp: f64,
    pub max_signal_deviation: f64,
    /// CD objective against the covariance SDP.
    pub max_objective_deviation: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnmAudit {
    pub instances: usize,
    pub max_toeplitz_deviation: f64,
    pub max_frequency_deviation: f64,
    pub max_objective_deviation: f64,
    pub passed: bool,
}

/// Audit instance `i` with `n` snapshots: one to three random sources, SNR
/// uniform in [0, 20] dB. Returns the batch and its noise power.
pub fn audit_instance(cfg: &AuditConfig, i: usize, n: usize) -> Result<(MmvBatch, f64)> {
    let mut rng = trial_rng(cfg.seed, i as u64);
    let l = rng.random_range(1..=3.min(cfg.sensors - 1));
    let freqs: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
    let noise = 10f64.powf(-rng.random_range(0.0..20.0) / 10.0);
    let g = ArrayGeometry::ula(cfg.sensors)?;
    let y = simulate_trial(&g, &SourceScene::unit_power(&freqs), n, noise, cfg.seed, (1 << 40) | i as u64)?;
    Ok((y, noise))
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Solves each instance with the mixed-norm proximal solver, SPARROW CD and
/// the covariance SDP, with snapshot counts cycling through 1, 5 and 20.
pub fn audit_l21_equivalence(cfg: &AuditConfig, tol: &Tolerances) -> Result<L21Audit> {
    cfg.validate()?;
    let g = ArrayGeometry::ula(cfg.sensors)?;
    let d = Dictionary::new(g, uniform_grid(cfg.grid_size)?);
    let rows: Vec<[f64; 4]> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| {
            let n = [1, 5, 20][i % 3];
            let (y, noise) = audit_instance(cfg, i, n)?;
            let lambda = select_lambda(noise, cfg.sensors);
            let r = sample_covariance(&y);
            let oracle = l21_solve(&d, &y, lambda, L21_TOL)?;
            let target = row_norms(&oracle.x);
            let opts = CdOptions { max_sweeps: 100_000, tol: 1e-12, ..CdOptions::default() };
            let cd = sparrow_cd(&d, &r, lambda, &opts)?;
            let sdp = sparrow_sdp_covariance(&d, &r, lambda)?;
            let dev = |s: &[f64]| s.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let x = reconstruct_signal(&sdp.s, &d, &y, lambda)?;
            let signal = (&x - &oracle.x).norm() / oracle.x.norm().max(f64::MIN_POSITIVE);
            Ok([dev(&cd.s), dev(&sdp.s), signal, relative(cd.objective, sdp.objective)])
        })
        .collect::<Result<_>>()?;
    let worst = |j: usize| rows.iter().map(|r| r[j]).fold(0.0, f64::max);
    let (cd, sdp, signal, objective) = (worst(0), worst(1), worst(2), worst(3));
    Ok(L21Audit {
        instances: rows.len(),
        max_row_norm_deviation_cd: cd,
        max_row_norm_deviation_sdp: sdp,
        max_signal_deviation: signal,
        max_objective_deviation: objective,
        passed: cd <= tol.row_norm && sdp <= tol.row_norm && signal <= tol.signal && objective <= tol.objective,
    })
}

/// Compares gridless SPARROW with the atomic-norm SDP on instances with
/// `1..=max_snapshots` snapshots.
pub fn audit_anm_equivalence(cfg: &AuditConfig, tol: &Tolerances) -> Result<AnmAudit> {
    cfg.validate()?;
    let g = ArrayGeometry::ula(cfg.sensors)?;
    let rows: Vec<[f64; 3]> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| {
            let n = 1 + i % cfg.max_snapshots;
            let (y, noise) = audit_instance(cfg, i, n)?;
            let lambda = select_lambda(noise, cfg.sensors);
            let gl = gl_sparrow(&g, &y, lambda)?;
            let anm = anm_sdp(&g, &y, lambda)?;
            let rep = check_anm_equivalence(&gl, &anm, n, lambda, 0.0);
            Ok([rep.max_u_deviation, rep.frequency_deviation, rep.objective_deviation])
        })
        .collect::<Result<_>>()?;
    let worst = |j: usize| rows.iter().map(|r| r[j]).fold(0.0, f64::max);
    let (u, f, o) = (worst(0), worst(1), worst(2));
    Ok(AnmAudit {
        instances: rows.len(),
        max_toeplitz_deviation: u,
        max_frequency_deviation: f,
        max_objective_deviation: o,
        passed: u <= tol.toeplitz && f <= tol.frequency && o <= tol.objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn wrap_distance_examples() {
        assert!((wrap_distance(0.9, -0.9) - 0.2).abs() < 1e-12);
        assert_eq!(wrap_distance(0.3, 0.3), 0.0);
        assert!((wrap_distance(-1.0, 0.9) - 0.1).abs() < 1e-12);
        assert!((wrap_distance(-1.0, 0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matching_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(match_estimates(&[0.3, 0.5], &[0.3, 0.5], &[1.0, 1.0], &mut rng).unwrap(), vec![0.3, 0.5]);
        assert_eq!(match_estimates(&[0.3, 0.5], &[0.51, 0.29], &[1.0, 1.0], &mut rng).unwrap(), vec![0.29, 0.51]);
        // Over-estimation keeps the strongest.
        let got = match_estimates(&[0.3, 0.5], &[0.31, 0.9, 0.49], &[2.0, 0.1, 1.0], &mut rng).unwrap();
        assert_eq!(got, vec![0.31, 0.49]);
        // Under-estimation pads deterministically.
        let a = match_estimates(&[0.3, 0.5], &[], &[], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = match_estimates(&[0.3, 0.5], &[], &[], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (-1.0..1.0).contains(v)));
        // Wrap-around pairing.
        assert_eq!(match_estimates(&[-0.99, 0.0], &[0.01, 0.99], &[1.0, 1.0], &mut rng).unwrap(), vec![0.99, 0.01]);
    }

    #[test]
    fn metric_examples() {
        let truth = [0.3, 0.5];
        let exact = vec![truth.to_vec(); 5];
        assert_eq!(bias(&exact, &truth).unwrap(), 0.0);
        assert_eq!(std_wa(&exact, &truth).unwrap(), 0.0);
        assert_eq!(rmse(&exact, &truth).unwrap(), 0.0);
        assert_eq!(resolution_fraction(&exact, &truth).unwrap(), 1.0);

        let offset = vec![vec![0.31, 0.5]; 3];
        assert!((bias(&offset, &truth).unwrap() - (0.01f64.powi(2) / 2.0).sqrt()).abs() < 1e-12);
        assert!(std_wa(&offset, &truth).unwrap() < 1e-12);

        let spread = vec![vec![0.3 + 0.02, 0.5], vec![0.3 - 0.02, 0.5]];
        // Only one of the two sources deviates, so the per-source average halves the variance.
        assert!((std_wa(&spread, &truth).unwrap() - 0.02 / 2f64.sqrt()).abs() < 1e-12);

        // Collapse onto mu_1 sits exactly on the boundary and counts as resolved.
        let collapse = vec![vec![0.3, 0.3]];
        assert_eq!(resolution_fraction(&collapse, &truth).unwrap(), 1.0);
        let failed = vec![vec![0.2, 0.3]];
        assert_eq!(resolution_fraction(&failed, &truth).unwrap(), 0.0);
        assert!(matches!(resolution_fraction(&[vec![0.1, 0.2, 0.3]], &[0.1, 0.2, 0.3]), Err(Error::Unsupported(_))));
        assert!(bias(&[], &truth).is_err());
    }

    #[test]
    fn std_matches_gaussian_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let truth = [0.1, -0.4];
        let trials: Vec<Vec<f64>> =
            (0..10_000).map(|_| truth.iter().map(|t| t + noise.sample(&mut rng)).collect()).collect();
        let s = std_wa(&trials, &truth).unwrap();
        assert!((s - 0.01).abs() < 0.03 * 0.01, "{s}");
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        let err = "lasso".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("gl-sparrow") && err.contains("spice-os"));
    }

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            array: ArraySpec::Ula(6),
            frequencies: vec![-0.3, 0.35],
            snr_db: 10.0,
            snapshots: 20,
            grid_size: 64,
            trials: 3,
            seed: 5,
            methods: vec![Method::SparrowCd, Method::RootMusic, Method::Music],
            lambda: LambdaRule::Auto,
            sweep: Sweep { variable: SweepVariable::Snapshots, values: vec![10.0, 20.0] },
            timing: false,
        }
    }

    #[test]
    fn config_validation_itemized() {
        let mut cfg = small_config();
        cfg.trials = 0;
        cfg.schema_version = 7;
        cfg.sweep.values = vec![2.5];
        let errs = cfg.validation_errors();
        assert_eq!(errs.len(), 3, "{errs:?}");
        assert!(small_config().validation_errors().is_empty());
        let json = serde_json::to_string(&small_config()).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, small_config());
        assert!(serde_json::from_str::<ExperimentConfig>(&json.replace("\"seed\"", "\"sed\"")).is_err());
        let with_lambda = json.replace("\"lambda\":\"auto\"", "\"lambda\":0.5");
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&with_lambda).unwrap().lambda, LambdaRule::Fixed(0.5));
    }

    #[test]
    fn noise_free_on_grid_is_exact() {
        let mut cfg = small_config();
        cfg.trials = 1;
        cfg.snr_db = 300.0;
        cfg.frequencies = vec![-0.25, 0.5];
        cfg.methods = vec![Method::SparrowCd];
        cfg.lambda = LambdaRule::Fixed(1e-6);
        cfg.sweep.values = vec![20.0];
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.summary[0].rmse, Some(0.0));
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = small_config();
        let a = serde_json::to_string(&run_experiment(&cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&run_experiment(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.summary.len(), 6);
        assert_eq!(report.trials.len(), 18);
        let mut buf = vec![];
        write_summary_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("method,sweep_value,bias,std,rmse,resolution,mean_ms,failures\n"));
        assert_eq!(text.lines().count(), 7);
        let mut buf = vec![];
        write_trials_csv(&report, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 18 * 2);
    }

    #[test]
    fn failures_are_counted() {
        let mut cfg = small_config();
        cfg.methods = vec![Method::SpiceOs];
        cfg.sweep.values = vec![2.0];
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.summary[0].failures, 3);
        assert_eq!(report.summary[0].rmse, None);
    }

    #[test]
    fn small_audits_pass() {
        let cfg = AuditConfig { trials: 6, ..AuditConfig::default() };
        let l21 = audit_l21_equivalence(&cfg, &Tolerances::default()).unwrap();
        assert!(l21.passed, "{l21:?}");
        let anm = audit_anm_equivalence(&AuditConfig { trials: 4, ..cfg }, &Tolerances::default()).unwrap();
        assert!(anm.passed, "{anm:?}");
        let strict = audit_l21_equivalence(&AuditConfig { trials: 3, ..cfg }, &Tolerances::uniform(1e-14)).unwrap();
        assert!(!strict.passed);
        assert!(audit_anm_equivalence(&AuditConfig { trials: 0, ..cfg }, &Tolerances::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rmse_decomposes(seed in any::<u64>(), t in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let trials: Vec<Vec<f64>> = (0..t)
                .map(|_| truth.iter().map(|m| wrap_frequency(m + rng.random_range(-0.2..0.2))).collect())
                .collect();
            let r = rmse(&trials, &truth).unwrap();
            let b = bias(&trials, &truth).unwrap();
            let s = std_wa(&trials, &truth).unwrap();
            prop_assert!((r * r - (b * b + s * s)).abs() <= 1e-12);
        }

        #[test]
        fn metrics_invariant_under_relabeling(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let trials: Vec<Vec<f64>> = (0..10)
                .map(|_| truth.iter().map(|m| wrap_frequency(m + rng.random_range(-0.1..0.1))).collect())
                .collect();
            let swapped: Vec<Vec<f64>> = trials.iter().map(|t| vec![t[1], t[0]]).collect();
            let truth_swapped = [truth[1], truth[0]];
            prop_assert!((rmse(&trials, &truth).unwrap() - rmse(&swapped, &truth_swapped).unwrap()).abs() < 1e-15);
            prop_assert!((bias(&trials, &truth).unwrap() - bias(&swapped, &truth_swapped).unwrap()).abs() < 1e-15);
            prop_assert_eq!(
                resolution_fraction(&trials, &truth).unwrap(),
                resolution_fraction(&swapped, &truth_swapped).unwrap()
            );
        }
    }
}
