use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sparrow::bench::{
    audit_anm_equivalence, audit_l21_equivalence, estimate, run_experiment, write_summary_csv, write_trials_csv,
    AuditConfig, Estimate, ExperimentConfig, MethodContext, MetricsReport, Method, Tolerances, SCHEMA_VERSION,
};
use sparrow::model::{simulate_mmv, uniform_grid, ArrayGeometry, MmvBatch, SourceScene};
use sparrow::sparrow::{select_lambda, Dictionary};
use sparrow::Error;

const PRESETS: [(&str, &str); 3] = [
    ("separation_desk", include_str!("../presets/separation_desk.json")),
    ("snapshots_desk", include_str!("../presets/snapshots_desk.json")),
    ("resolution_desk", include_str!("../presets/resolution_desk.json")),
];

#[derive(Parser)]
#[command(name = "sparrow", version, about = "Jointly sparse frequency estimation from multiple snapshots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an MMV batch and write it as JSON.
    Simulate(SimulateArgs),
    /// Run one estimator on a batch file.
    Estimate(EstimateArgs),
    /// Run a Monte-Carlo experiment from a JSON config or a shipped preset.
    Bench(BenchArgs),
    /// Audit the mixed-norm and atomic-norm equivalences on random instances.
    Equiv(EquivArgs),
}

#[derive(Args)]
struct ArrayArgs {
    /// Uniform linear array with this many sensors.
    #[arg(long, conflicts_with = "positions", required_unless_present = "positions")]
    ula: Option<usize>,
    /// Sensor positions in half wavelengths, comma separated, starting at 0.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    positions: Option<Vec<f64>>,
}

impl ArrayArgs {
    fn geometry(&self) -> sparrow::Result<ArrayGeometry> {
        match (&self.ula, &self.positions) {
            (Some(m), _) => ArrayGeometry::ula(*m),
            (None, Some(p)) => ArrayGeometry::new(p.clone()),
            (None, None) => Err(Error::InvalidInput("give --ula or --positions".into())),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    array: ArrayArgs,
    /// Source spatial frequencies in [-1, 1), comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    freqs: Vec<f64>,
    /// SNR in dB; unit source powers, noise power 10^(-snr/10).
    #[arg(long, allow_hyphen_values = true)]
    snr: f64,
    /// Number of snapshots.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    /// Batch file written by `simulate`.
    #[arg(long)]
    input: PathBuf,
    /// One of sparrow-cd, sparrow-sdp, gl-sparrow, anm, l21, music, root-music, spice-us, spice-os.
    #[arg(long)]
    method: String,
    /// Regularization parameter, or `auto` for sqrt(sigma^2 M ln M) with the file's noise power.
    #[arg(long, default_value = "auto")]
    lambda: String,
    /// Grid size for the grid-based methods.
    #[arg(long, default_value_t = 200)]
    grid: usize,
    /// Number of sources for the subspace methods; defaults to the file's scene.
    #[arg(long)]
    sources: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Shipped preset: separation_desk, snapshots_desk or resolution_desk.
    #[arg(long)]
    preset: Option<String>,
    /// Override the number of trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Directory receiving report.json, trials.csv and summary.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EquivArgs {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 6)]
    sensors: usize,
    #[arg(long, default_value_t = 24)]
    grid: usize,
    /// Largest snapshot count of the atomic-norm audit.
    #[arg(long, default_value_t = 10)]
    max_snapshots: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Apply one tolerance to every check instead of the defaults.
    #[arg(long)]
    tol: Option<f64>,
    /// Also write the audit as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Self-describing batch file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchFile {
    schema_version: u32,
    geometry: ArrayGeometry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene: Option<SourceScene>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    snr_db: Option<f64>,
    batch: MmvBatch,
}

#[derive(Debug, Serialize)]
struct EstimateReport {
    method: Method,
    lambda: Option<f64>,
    #[serde(flatten)]
    estimate: Estimate,
    wall_ms: f64,
}

#[derive(Debug, Serialize)]
struct EquivReport {
    tolerances: Tolerances,
    l21: sparrow::bench::L21Audit,
    anm: sparrow::bench::AnmAudit,
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_)
            | Error::UnsupportedGeometry
            | Error::InvalidOrder { .. }
            | Error::Unsupported(_) => Failure::Usage(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn read_file(path: &Path) -> std::result::Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("report types serialize");
    s.push('\n');
    s.into_bytes()
}

fn simulate(a: &SimulateArgs) -> CmdResult {
    let g = a.array.geometry()?;
    let scene = SourceScene::unit_power(&a.freqs);
    scene.validate()?;
    if !a.snr.is_finite() {
        return Err(Failure::Usage("--snr must be finite".into()));
    }
    let batch = simulate_mmv(&g, &scene, a.n, 10f64.powf(-a.snr / 10.0), a.seed)?;
    let file = BatchFile { schema_version: SCHEMA_VERSION, geometry: g, scene: Some(scene), snr_db: Some(a.snr), batch };
    write_file(&a.out, &to_json(&file))?;
    println!(
        "wrote {}x{} batch to {}",
        file.batch.sensors(),
        file.batch.snapshots(),
        a.out.display()
    );
    Ok(())
}

fn run_estimate(a: &EstimateArgs) -> CmdResult {
    let method: Method = a.method.parse()?;
    let file: BatchFile = serde_json::from_str(&read_file(&a.input)?)
        .map_err(|e| Failure::Usage(format!("{}: {e}", a.input.display())))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(Failure::Usage(format!("schema_version must be {SCHEMA_VERSION}")));
    }
    let g = file.geometry;
    if method.is_gridless() {
        g.require_ula()?;
    }
    let lambda = if method.needs_lambda() {
        Some(match a.lambda.as_str() {
            "auto" => {
                let noise = file.batch.noise_power.ok_or_else(|| {
                    Failure::Usage("--lambda auto needs the noise power in the input file; pass an explicit --lambda".into())
                })?;
                select_lambda(noise, g.sensors())
            }
            v => v
                .parse::<f64>()
                .ok()
                .filter(|x| *x > 0.0 && x.is_finite())
                .ok_or_else(|| Failure::Usage(format!("--lambda must be `auto` or a positive number, got `{v}`")))?,
        })
    } else {
        None
    };
    let sources = a.sources.or(file.scene.as_ref().map(|s| s.len()));
    if method.needs_order() && sources.is_none() {
        return Err(Failure::Usage(format!("{method} needs --sources")));
    }
    let dictionary = if method.is_gridless() { None } else { Some(Dictionary::new(g.clone(), uniform_grid(a.grid)?)) };
    let ctx = MethodContext { geometry: g, dictionary, lambda, sources };
    let start = Instant::now();
    let est = estimate(method, &file.batch, &ctx)?;
    let report = EstimateReport { method, lambda, estimate: est, wall_ms: start.elapsed().as_secs_f64() * 1e3 };
    write_file(&a.out, &to_json(&report))?;
    println!("{method}: {} source(s)", report.estimate.model_order);
    for (f, m) in report.estimate.frequencies.iter().zip(&report.estimate.magnitudes) {
        println!("  mu = {f:+.6}  magnitude = {m:.6}");
    }
    if report.estimate.low_confidence {
        println!("  (low confidence)");
    }
    Ok(())
}

fn load_config(a: &BenchArgs) -> std::result::Result<ExperimentConfig, Failure> {
    let (name, text) = match (&a.config, &a.preset) {
        (Some(path), _) => (path.display().to_string(), read_file(path)?),
        (None, Some(p)) => {
            let (_, text) = PRESETS.iter().find(|(n, _)| n == p).ok_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                Failure::Usage(format!("unknown preset `{p}`; available: {}", names.join(", ")))
            })?;
            (p.clone(), text.to_string())
        }
        (None, None) => return Err(Failure::Usage("give --config or --preset".into())),
    };
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{name}: {e}")))?;
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    let errs = cfg.validation_errors();
    if !errs.is_empty() {
        let list: Vec<String> = errs.iter().map(|e| format!("  - {e}")).collect();
        return Err(Failure::Usage(format!("{name} is invalid:\n{}", list.join("\n"))));
    }
    Ok(cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.5}"))
}

fn print_summary(report: &MetricsReport) {
    println!(
        "{:<12} {:>10} {:>9} {:>9} {:>9} {:>9} {:>10} {:>8}",
        "method",
        report.config.sweep.variable.name(),
        "bias",
        "std",
        "rmse",
        "resol.",
        "mean_ms",
        "failed"
    );
    for s in &report.summary {
        println!(
            "{:<12} {:>10} {:>9} {:>9} {:>9} {:>9} {:>10.3} {:>8}",
            s.method.name(),
            s.sweep_value,
            fmt_opt(s.bias),
            fmt_opt(s.std),
            fmt_opt(s.rmse),
            fmt_opt(s.resolution),
            s.mean_ms,
            s.failures
        );
    }
    for b in &report.bounds {
        println!("crb at {} = {}", b.sweep_value, fmt_opt(b.crb));
    }
}

fn bench(a: &BenchArgs) -> CmdResult {
    let cfg = load_config(a)?;
    let report = run_experiment(&cfg)?;
    fs::create_dir_all(&a.out_dir)
        .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", a.out_dir.display())))?;
    write_file(&a.out_dir.join("report.json"), &to_json(&report))?;
    let mut buf = vec![];
    write_trials_csv(&report, &mut buf)?;
    write_file(&a.out_dir.join("trials.csv"), &buf)?;
    let mut buf = vec![];
    write_summary_csv(&report, &mut buf)?;
    write_file(&a.out_dir.join("summary.csv"), &buf)?;
    print_summary(&report);
    Ok(())
}

fn equiv(a: &EquivArgs) -> CmdResult {
    let cfg = AuditConfig {
        trials: a.trials,
        sensors: a.sensors,
        grid_size: a.grid,
        max_snapshots: a.max_snapshots,
        seed: a.seed,
    };
    cfg.validate()?;
    let tolerances = match a.tol {
        Some(t) if !(t > 0.0) => return Err(Failure::Usage("--tol must be positive".into())),
        Some(t) => Tolerances::uniform(t),
        None => Tolerances::default(),
    };
    let l21 = audit_l21_equivalence(&cfg, &tolerances)?;
    let anm = audit_anm_equivalence(&cfg, &tolerances)?;
    let status = |p: bool| if p { "PASS" } else { "FAIL" };
    println!("mixed-norm audit ({} instances): {}", l21.instances, status(l21.passed));
    println!("  row norms, CD   {:.3e} (tol {:.1e})", l21.max_row_norm_deviation_cd, tolerances.row_norm);
    println!("  row norms, SDP  {:.3e} (tol {:.1e})", l21.max_row_norm_deviation_sdp, tolerances.row_norm);
    println!("  signal          {:.3e} (tol {:.1e})", l21.max_signal_deviation, tolerances.signal);
    println!("  CD vs SDP obj.  {:.3e} (tol {:.1e})", l21.max_objective_deviation, tolerances.objective);
    println!("atomic-norm audit ({} instances): {}", anm.instances, status(anm.passed));
    println!("  toeplitz        {:.3e} (tol {:.1e})", anm.max_toeplitz_deviation, tolerances.toeplitz);
    println!("  frequencies     {:.3e} (tol {:.1e})", anm.max_frequency_deviation, tolerances.frequency);
    println!("  objective       {:.3e} (tol {:.1e})", anm.max_objective_deviation, tolerances.objective);
    let passed = l21.passed && anm.passed;
    if let Some(out) = &a.out {
        write_file(out, &to_json(&EquivReport { tolerances, l21, anm }))?;
    }
    if passed {
        Ok(())
    } else {
        Err(Failure::Numerical("equivalence audit failed".into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Estimate(a) => run_estimate(a),
        Command::Bench(a) => bench(a),
        Command::Equiv(a) => equiv(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
