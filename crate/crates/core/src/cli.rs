//! Experiment configuration, checkpoints and the commands behind the
//! `curveflow` binary.
//!
//! Every command is a plain function returning a process exit code:
//! 0 success, 1 failed check, 2 invalid input, 3 divergence or degenerate
//! diagnostics. Artifacts are text: JSON for configs, checkpoints and the
//! run manifest; CSV for data; SVG for plots. Floats are written in the
//! shortest form that parses back to the same `f64`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{generate_train_eval, write_points_csv, DatasetKind, DatasetSpec};
use crate::diffengine::{compare_gradients, evaluate_with_gradients, finite_difference_gradient, Bindings, Graph, ParameterSet, Tensor, Var};
use crate::losses::{curve_fm_term, robust_curvature_term, Batch, LossReport};
use crate::metrics::{energy_distance_capped, schedule_diagnostics, sliced_wasserstein, EvalReport, ScheduleDiagnostics, MAX_PAIRWISE_POINTS};
use crate::plot::{line_svg, scatter_svg, Series, PALETTE};
use crate::rng::{self, streams, NormalSampler};
use crate::sampling::{sample_batch, SolverConfig, SolverMethod};
use crate::schedule::{CoefficientSchedule, GridSpec, NeuralSchedule, PolynomialSchedule, ScheduleKind, DEFAULT_SCHEDULE_HIDDEN};
use crate::training::{train_with_hook, OptimizerState, TimestepSampler, TrainConfig, TrainError, TrainedState};
use crate::velocity_model::{VelocityField, VelocityLayout};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Gradient check threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Exit code for an error surfaced by a command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. }
        | Error::NonFiniteGradient { .. }
        | Error::DegenerateTrajectory { .. }
        | Error::Diagnostic(_)
        | Error::Diff(_) => EXIT_DIVERGED,
        _ => EXIT_INVALID,
    }
}

fn fail(err: &Error) -> i32 {
    eprintln!("error: {err}");
    exit_code(err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    /// Residual MLP width (neural kind).
    pub hidden: usize,
    /// Start the residual nets at exactly zero (neural kind).
    pub zero_init: bool,
    /// Coefficients for the polynomial kind.
    pub polynomial: Option<PolynomialSchedule>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { kind: ScheduleKind::Neural, hidden: DEFAULT_SCHEDULE_HIDDEN, zero_init: false, polynomial: None }
    }
}

impl ScheduleConfig {
    pub fn of_kind(kind: ScheduleKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ScheduleKind::Neural && self.hidden == 0 {
            return Err(Error::config("schedule.hidden must be positive"));
        }
        match (&self.polynomial, self.kind) {
            (None, ScheduleKind::Polynomial) => Err(Error::config("schedule.polynomial is required for the polynomial kind")),
            (Some(p), ScheduleKind::Polynomial) => PolynomialSchedule::new(p.a.clone(), p.b.clone()).map(|_| ()),
            _ => Ok(()),
        }
    }

    /// Freshly initialized schedule.
    pub fn build(&self, seed: u64) -> Result<CoefficientSchedule> {
        self.validate()?;
        Ok(match self.kind {
            ScheduleKind::Linear => CoefficientSchedule::Linear,
            ScheduleKind::Trigonometric => CoefficientSchedule::Trigonometric,
            ScheduleKind::Polynomial => CoefficientSchedule::Polynomial(self.polynomial.clone().expect("validated")),
            ScheduleKind::Neural if self.zero_init => CoefficientSchedule::Neural(NeuralSchedule::zeroed(self.hidden, seed)?),
            ScheduleKind::Neural => CoefficientSchedule::Neural(NeuralSchedule::new(self.hidden, seed)?),
        })
    }

    /// Schedule with parameters taken from `params` (`schedule.*` names).
    pub fn restore(&self, params: &ParameterSet) -> Result<CoefficientSchedule> {
        match self.kind {
            ScheduleKind::Neural => Ok(CoefficientSchedule::Neural(NeuralSchedule::from_params(
                self.hidden,
                params.with_prefix("schedule."),
            )?)),
            _ => self.build(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Held-out points and generated samples per evaluation; defaults to
    /// the training set size.
    pub eval_count: Option<usize>,
    pub projections: usize,
    /// `(x0, eps)` pairs averaged in the curvature profile.
    pub curvature_pairs: usize,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { eval_count: None, projections: 128, curvature_pairs: 256, seed: 0 }
    }
}

fn default_velocity() -> VelocityLayout {
    VelocityLayout::new(2)
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_lambda_grid() -> Vec<f64> {
    vec![0.0, 0.001, 0.01, 0.1, 1.0]
}

/// Everything one experiment needs. Unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_velocity")]
    pub velocity: VelocityLayout,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Regularizer weights swept by `compare`.
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
}

impl ExperimentConfig {
    /// Defaults around `dataset`.
    pub fn new(dataset: DatasetSpec) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            dataset,
            schedule: ScheduleConfig::default(),
            velocity: default_velocity(),
            train: TrainConfig::default(),
            solver: SolverConfig::default(),
            metrics: MetricsConfig::default(),
            output_dir: default_output_dir(),
            lambda_grid: default_lambda_grid(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::config(format!("malformed config: {e}")))?;
        check_version(&value)?;
        let config: Self = serde_json::from_value(value).map_err(|e| Error::config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { expected: FORMAT_VERSION, found: self.format_version });
        }
        self.dataset.validate()?;
        self.schedule.validate()?;
        self.velocity.validate()?;
        if self.velocity.dim != 2 {
            return Err(Error::config(format!("velocity.dim must be 2 for the 2-D datasets, got {}", self.velocity.dim)));
        }
        self.train.validate()?;
        self.solver.validate()?;
        if self.metrics.projections == 0 || self.metrics.curvature_pairs == 0 || self.metrics.eval_count == Some(0) {
            return Err(Error::config("metrics.projections, metrics.curvature_pairs and metrics.eval_count must be positive"));
        }
        if let Some(bad) = self.lambda_grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::config(format!("lambda_grid entries must be non-negative, got {bad}")));
        }
        Ok(())
    }

    pub fn eval_count(&self) -> usize {
        self.metrics.eval_count.unwrap_or(self.dataset.count)
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::new(self.train.grid_m).expect("validated")
    }

    /// Training rows and held-out rows.
    pub fn data(&self) -> Result<(Tensor, Tensor)> {
        generate_train_eval(&self.dataset, self.eval_count())
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.train.seed = seed;
        }
        if let Some(out) = &overrides.out {
            self.output_dir = out.clone();
        }
    }
}

fn check_version(value: &serde_json::Value) -> Result<()> {
    match value.get("format_version") {
        None => Err(Error::config("format_version: missing field")),
        Some(v) => {
            let found = v
                .as_u64()
                .ok_or_else(|| Error::config("format_version: expected an unsigned integer"))?;
            if found != FORMAT_VERSION as u64 {
                return Err(Error::VersionMismatch { expected: FORMAT_VERSION, found: found.min(u32::MAX as u64) as u32 });
            }
            Ok(())
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Trained parameters plus everything needed to rebuild the models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ExperimentConfig,
    /// `velocity.*` and, for the neural kind, `schedule.a.*` / `schedule.b.*`.
    pub parameters: ParameterSet,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
}

impl Checkpoint {
    pub fn from_state(config: &ExperimentConfig, state: &TrainedState) -> Result<Self> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            parameters: state.velocity.params().merged(&state.schedule.params())?,
            optimizer: Some(state.optimizer.clone()),
            step: state.step,
        })
    }

    pub fn schedule(&self) -> Result<CoefficientSchedule> {
        self.config.schedule.restore(&self.parameters)
    }

    pub fn velocity(&self) -> Result<VelocityField> {
        VelocityField::from_params(self.config.velocity, self.parameters.with_prefix("velocity."))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config(format!("malformed checkpoint: {e}")))?;
        check_version(&value)?;
        let ck: Self = serde_json::from_value(value).map_err(|e| Error::config(format!("checkpoint: {e}")))?;
        ck.config.validate()?;
        ck.schedule()?;
        ck.velocity()?;
        Ok(ck)
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_text(path, &checkpoint.to_json())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_text(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> String {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii csv")
}

/// `step,fm_loss,curvature_loss,total,lr`.
pub fn write_history_csv<W: Write>(history: &[LossReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,fm_loss,curvature_loss,total,lr")?;
    for r in history {
        writeln!(out, "{},{},{},{},{}", r.step, r.fm_loss, r.curvature_loss, r.total, r.lr)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
    outputs: Vec<String>,
    created_unix_seconds: u64,
}

fn write_manifest(dir: &Path, command: &str, config: &ExperimentConfig, outputs: &[&str]) -> Result<()> {
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: config.train.seed,
        config,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        created_unix_seconds: created,
    };
    write_text(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
}

/// Trains the configured models on the training split.
pub fn train_models(config: &ExperimentConfig, train_rows: &Tensor) -> std::result::Result<crate::training::TrainOutcome, TrainError> {
    let schedule = config.schedule.build(config.train.seed)?;
    let velocity = VelocityField::with_layout(config.velocity, config.train.seed)?;
    train_with_hook(&config.train, train_rows, schedule, velocity, |_, _| {})
}

fn load_and_override(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    config.apply(overrides);
    config.validate()?;
    Ok(config)
}

/// `train`: writes `checkpoint.json`, `history.csv` and `manifest.json`.
pub fn cmd_train(config_path: &Path, overrides: &Overrides) -> i32 {
    let config = match load_and_override(config_path, overrides) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    match run_train(&config) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn run_train(config: &ExperimentConfig) -> Result<i32> {
    let dir = &config.output_dir;
    let (train_rows, _) = config.data()?;
    let (outcome, diverged) = match train_models(config, &train_rows) {
        Ok(o) => (o, None),
        Err(TrainError::Invalid(e)) => return Err(e),
        Err(TrainError::Diverged { step, reason, partial }) => (*partial, Some((step, reason))),
    };
    save_checkpoint(&dir.join("checkpoint.json"), &Checkpoint::from_state(config, &outcome.state)?)?;
    write_text(&dir.join("history.csv"), &csv_text(|b| write_history_csv(&outcome.history, b)))?;
    write_manifest(dir, "train", config, &["checkpoint.json", "history.csv"])?;
    if let Some((step, reason)) = diverged {
        eprintln!("error: training diverged at step {step}: {reason}; last valid checkpoint kept");
        return Ok(EXIT_DIVERGED);
    }
    if let Some(last) = outcome.history.last() {
        println!("trained {} steps, final fm_loss {} curvature_loss {}", last.step, last.fm_loss, last.curvature_loss);
    }
    println!("wrote {}", dir.display());
    Ok(EXIT_OK)
}

/// Arguments of `sample`; unset fields fall back to the checkpoint config.
#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub count: usize,
    pub steps: Option<usize>,
    pub method: Option<String>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Replaces the checkpoint's config for solver defaults, the held-out
    /// overlay and the output directory.
    pub config: Option<ExperimentConfig>,
}

/// `sample`: writes `samples.csv` and `samples.svg`.
pub fn cmd_sample(args: &SampleArgs) -> i32 {
    match run_sample(args) {
        Ok(()) => EXIT_OK,
        Err(e) => fail(&e),
    }
}

fn run_sample(args: &SampleArgs) -> Result<()> {
    let method = args.method.as_deref().map(str::parse::<SolverMethod>).transpose()?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let config = args.config.as_ref().unwrap_or(&ck.config);
    let solver = SolverConfig {
        method: method.unwrap_or(config.solver.method),
        steps: args.steps.unwrap_or(config.solver.steps),
    };
    let velocity = ck.velocity()?;
    let samples = sample_batch(&velocity, args.count, velocity.dim(), args.seed, &solver)?;
    let dir = args.out.clone().unwrap_or_else(|| config.output_dir.clone());
    write_text(&dir.join("samples.csv"), &csv_text(|b| write_points_csv(&samples, b)))?;
    let (_, held_out) = config.data()?;
    let svg = scatter_svg(
        &format!("{} samples vs held-out {}", samples.rows(), config.dataset.kind),
        &[points_series("held-out", PALETTE[0], &held_out), points_series("generated", PALETTE[1], &samples)],
    );
    write_text(&dir.join("samples.svg"), &svg)?;
    println!("wrote {} samples to {}", samples.rows(), dir.display());
    Ok(())
}

fn points_series(label: &str, color: &str, points: &Tensor) -> Series {
    Series::new(label, color, points.row_iter().map(|r| r[0]).collect(), points.row_iter().map(|r| r[1]).collect())
}

/// What `analyze` inspects.
#[derive(Debug, Clone)]
pub enum AnalyzeTarget {
    Checkpoint(PathBuf),
    Kind(ScheduleKind),
}

#[derive(Debug, Clone)]
pub struct AnalyzeArgs {
    pub target: AnalyzeTarget,
    pub grid_m: Option<usize>,
    pub pairs: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Supplies held-out data for `x0` and the default grid when the
    /// target is a schedule kind.
    pub config: Option<ExperimentConfig>,
}

/// `(x0, eps)` pairs for the curvature profile. `x0` cycles through
/// `data` when given, otherwise it is standard normal.
pub fn curvature_pairs(data: Option<&Tensor>, count: usize, dim: usize, seed: u64) -> (Tensor, Tensor) {
    let mut s = NormalSampler::new(rng::stream(seed, streams::PAIRS));
    let mut normal = |n: usize| Tensor::new(n, dim, (0..n * dim).map(|_| s.next()).collect());
    let x0 = match data {
        Some(d) if d.rows() > 0 => d.select_rows(&(0..count).map(|i| i % d.rows()).collect::<Vec<_>>()),
        _ => normal(count),
    };
    let eps = normal(count);
    (x0, eps)
}

/// Determinant integral and curvature profile of the analyzed schedule.
pub fn analyze(args: &AnalyzeArgs) -> Result<ScheduleDiagnostics> {
    if args.pairs == 0 {
        return Err(Error::config("pairs must be positive"));
    }
    let (schedule, data, default_m) = match &args.target {
        AnalyzeTarget::Checkpoint(path) => {
            let ck = load_checkpoint(path)?;
            let (_, held_out) = ck.config.data()?;
            (ck.schedule()?, Some(held_out), ck.config.train.grid_m)
        }
        AnalyzeTarget::Kind(kind) => {
            let schedule = ScheduleConfig::of_kind(*kind).build(args.seed)?;
            match &args.config {
                Some(c) => (schedule, Some(c.data()?.1), c.train.grid_m),
                None => (schedule, None, crate::DEFAULT_GRID_M),
            }
        }
    };
    let grid = GridSpec::new(args.grid_m.unwrap_or(default_m))?;
    let (x0, eps) = curvature_pairs(data.as_ref(), args.pairs, 2, args.seed);
    schedule_diagnostics(&schedule, &grid, &x0, &eps)
}

/// `analyze`: writes `curvature_profile.csv` and `curvature_profile.svg`
/// and prints the determinant integral.
pub fn cmd_analyze(args: &AnalyzeArgs) -> i32 {
    let diag = match analyze(args) {
        Ok(d) => d,
        Err(e) => return fail(&e),
    };
    let dir = args.out.clone().or_else(|| args.config.as_ref().map(|c| c.output_dir.clone())).unwrap_or_else(|| PathBuf::from("."));
    let written = write_text(&dir.join("curvature_profile.csv"), &csv_text(|b| diag.write_csv(b))).and_then(|_| {
        let svg = line_svg(
            "curvature profile",
            &[
                Series::new("mean kappa", PALETTE[0], diag.t.clone(), diag.mean_curvature.clone()),
                Series::new("det", PALETTE[1], diag.t.clone(), diag.determinant.clone()),
            ],
        );
        write_text(&dir.join("curvature_profile.svg"), &svg)
    });
    if let Err(e) = written {
        return fail(&e);
    }
    println!("determinant_integral = {}", diag.determinant_integral);
    EXIT_OK
}

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub lambda: f64,
    pub timestep_sampler: TimestepSampler,
    pub report: EvalReport,
    pub final_fm_loss: f64,
    pub steps: u64,
}

pub const RESULTS_HEADER: &str =
    "variant,lambda,timestep_sampler,energy_distance,sliced_wasserstein,determinant_integral,max_mean_curvature,final_fm_loss,steps,subsampled";

impl VariantResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.lambda,
            self.timestep_sampler,
            self.report.energy_distance,
            self.report.sliced_wasserstein,
            self.report.determinant_integral,
            self.report.max_mean_curvature,
            self.final_fm_loss,
            self.steps,
            self.report.subsampled
        )
    }
}

/// Variants run by `compare`: two rectified-flow baselines and the
/// configured schedule at every grid weight.
pub fn compare_variants(config: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut out = Vec::new();
    for (name, sampler) in [("rf_uniform", TimestepSampler::Uniform), ("rf_logit_normal", TimestepSampler::LogitNormal)] {
        let mut c = config.clone();
        c.schedule = ScheduleConfig::of_kind(ScheduleKind::Linear);
        c.train.lambda = 0.0;
        c.train.timestep_sampler = sampler;
        out.push((name.to_string(), c));
    }
    for &lambda in &config.lambda_grid {
        let mut c = config.clone();
        c.train.lambda = lambda;
        out.push((format!("curveflow_lambda_{lambda}"), c));
    }
    out
}

/// Samples `eval_count` points from the trained model and scores them
/// against the held-out rows.
pub fn evaluate(config: &ExperimentConfig, state: &TrainedState, held_out: &Tensor) -> Result<(EvalReport, Tensor)> {
    let m = &config.metrics;
    let samples = sample_batch(&state.velocity, held_out.rows(), held_out.cols(), m.seed, &config.solver)?;
    let energy = energy_distance_capped(&samples, held_out, MAX_PAIRWISE_POINTS, m.seed)?;
    let sw = sliced_wasserstein(&samples, held_out, m.projections, m.seed)?;
    let (x0, eps) = curvature_pairs(Some(held_out), m.curvature_pairs, held_out.cols(), m.seed);
    let diag = schedule_diagnostics(&state.schedule, &config.grid(), &x0, &eps)?;
    let report = EvalReport {
        energy_distance: energy.value,
        sliced_wasserstein: sw,
        determinant_integral: diag.determinant_integral,
        max_mean_curvature: diag.max_mean_curvature(),
        subsampled: energy.subsampled,
    };
    Ok((report, samples))
}

/// Trains and evaluates every variant in order, calling `on_row` as each
/// one completes. Per-variant checkpoints and histories go to `dir`.
pub fn run_compare(config: &ExperimentConfig, dir: &Path, mut on_row: impl FnMut(&VariantResult) -> Result<()>) -> Result<Vec<VariantResult>> {
    if config.lambda_grid.is_empty() {
        return Err(Error::config("lambda_grid must not be empty"));
    }
    let (train_rows, held_out) = config.data()?;
    let mut results = Vec::new();
    let mut scatter = vec![points_series("held-out", "#999999", &held_out)];
    for (i, (name, variant)) in compare_variants(config).into_iter().enumerate() {
        let outcome = match train_models(&variant, &train_rows) {
            Ok(o) => o,
            Err(TrainError::Invalid(e)) => return Err(e),
            Err(TrainError::Diverged { step, reason, .. }) => {
                eprintln!("error: variant {name} diverged: {reason}");
                return Err(Error::Divergence { step: step as usize });
            }
        };
        write_text(&dir.join(format!("history_{name}.csv")), &csv_text(|b| write_history_csv(&outcome.history, b)))?;
        save_checkpoint(&dir.join(format!("checkpoint_{name}.json")), &Checkpoint::from_state(&variant, &outcome.state)?)?;
        let (report, samples) = evaluate(&variant, &outcome.state, &held_out)?;
        if name == "rf_uniform" || variant.train.lambda == config.train.lambda && name.starts_with("curveflow") {
            scatter.push(points_series(&name, PALETTE[i % PALETTE.len()], &samples.slice_rows(0, samples.rows().min(2000))));
        }
        let row = VariantResult {
            variant: name,
            lambda: variant.train.lambda,
            timestep_sampler: variant.train.timestep_sampler,
            report,
            final_fm_loss: outcome.history.last().map_or(f64::NAN, |r| r.fm_loss),
            steps: outcome.state.step,
        };
        on_row(&row)?;
        results.push(row);
    }
    write_text(&dir.join("compare_samples.svg"), &scatter_svg("compare: generated samples", &scatter))?;
    Ok(results)
}

/// `compare`: writes `results.csv` (flushed after each variant), the
/// per-variant histories and checkpoints, and `manifest.json`.
pub fn cmd_compare(config_path: &Path, overrides: &Overrides) -> i32 {
    let config = match load_and_override(config_path, overrides) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let dir = config.output_dir.clone();
    let results_path = dir.join("results.csv");
    let mut text = format!("{RESULTS_HEADER}\n");
    let outcome = run_compare(&config, &dir, |row| {
        println!(
            "{}: energy {} sliced-W1 {} det-integral {}",
            row.variant, row.report.energy_distance, row.report.sliced_wasserstein, row.report.determinant_integral
        );
        text.push_str(&row.csv_row());
        text.push('\n');
        write_text(&results_path, &text)
    });
    match outcome.and_then(|_| write_manifest(&dir, "compare", &config, &["results.csv"])) {
        Ok(()) => EXIT_OK,
        Err(e) => fail(&e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub instances: usize,
    pub parameters: usize,
    /// Parameter groups whose gradients were compared, e.g. `schedule.a`.
    pub groups: std::collections::BTreeSet<String>,
}

/// Relative-error floor for entries whose true gradient is ~0.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Analytic vs central-difference gradients of the total loss on small
/// random instances, over velocity and both schedule networks. With
/// `corrupt`, one analytic entry is perturbed (a negative control).
pub fn run_gradcheck(seed: u64, corrupt: bool) -> Result<GradcheckReport> {
    let mut worst = GradcheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        instances: 0,
        parameters: 0,
        groups: Default::default(),
    };
    for k in 0..3u64 {
        let s = seed.wrapping_mul(31).wrapping_add(k);
        let layout = VelocityLayout { dim: 2 + k as usize, hidden: 6, layers: 2, time_features: 4 };
        let velocity = VelocityField::with_layout(layout, s)?;
        let schedule = CoefficientSchedule::Neural(NeuralSchedule::new(5, s)?);
        let grid = GridSpec::new(12)?;
        let lambda = 0.3;
        let mut normals = NormalSampler::new(rng::stream(s, streams::TRAIN_NOISE));
        let n = 4;
        let dim = layout.dim;
        let mut draw = |count: usize| Tensor::new(count, dim, (0..count * dim).map(|_| normals.next()).collect());
        let x0 = draw(n);
        let eps = draw(n);
        let ts: Vec<f64> = (0..n).map(|i| 0.1 + 0.8 * (i as f64 + 0.5) / n as f64).collect();
        let batch = Batch::new(x0, eps, ts)?;
        let params = velocity.params().merged(&schedule.params())?;
        let h = grid.dt();
        let loss = |g: &Graph, b: &Bindings| -> Result<Var> {
            let fm = curve_fm_term(g, b, &batch, &velocity, &schedule, h, false)?;
            let reg = robust_curvature_term(g, b, &schedule, &grid, lambda)?;
            Ok(g.add(fm, reg))
        };
        let (_, mut analytic) = evaluate_with_gradients(loss, &params)?;
        if corrupt && k == 0 {
            if let Some((_, t)) = analytic.iter_mut().next() {
                t.data_mut()[0] = t.data()[0] * 1.5 + 1e-3;
            }
        }
        let numeric = finite_difference_gradient(loss, &params, 1e-6)?;
        let d = compare_gradients(&analytic, &numeric, GRADCHECK_FLOOR);
        for name in analytic.names().filter(|n| numeric.get(n).is_some()) {
            let group = if name.starts_with("schedule.") { &name[..10] } else { name.split('.').next().unwrap_or(name) };
            worst.groups.insert(group.to_string());
        }
        worst.instances += 1;
        worst.parameters += params.scalar_count();
        if d.max_relative_error > worst.max_relative_error || worst.worst_parameter.is_empty() {
            worst.max_relative_error = d.max_relative_error;
            worst.worst_parameter = d.worst_parameter;
            worst.worst_index = d.worst_index;
        }
    }
    Ok(worst)
}

/// `gradcheck`: exit 0 iff the maximum relative error is below
/// [`GRADCHECK_TOLERANCE`].
pub fn cmd_gradcheck(seed: u64, corrupt: bool, out: Option<&Path>) -> i32 {
    let report = match run_gradcheck(seed, corrupt) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    if let Some(dir) = out {
        let text = format!(
            "{{\n  \"seed\": {seed},\n  \"max_relative_error\": {},\n  \"worst_parameter\": \"{}[{}]\",\n  \"tolerance\": {}\n}}\n",
            report.max_relative_error, report.worst_parameter, report.worst_index, GRADCHECK_TOLERANCE
        );
        if let Err(e) = write_text(&dir.join("gradcheck.json"), &text) {
            return fail(&e);
        }
    }
    println!(
        "max relative error {:e} over {} parameters in {} instances (worst: {}[{}])",
        report.max_relative_error, report.parameters, report.instances, report.worst_parameter, report.worst_index
    );
    if report.max_relative_error < GRADCHECK_TOLERANCE {
        EXIT_OK
    } else {
        eprintln!("gradient check failed: worst offender {}[{}]", report.worst_parameter, report.worst_index);
        EXIT_CHECK_FAILED
    }
}

/// Small config used by tests and examples.
pub fn quick_config(kind: DatasetKind, count: usize, epochs: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(DatasetSpec { kind, count, seed: 0, noise_std: 0.1 });
    c.velocity = VelocityLayout { dim: 2, hidden: 32, layers: 2, time_features: 8 };
    c.schedule.hidden = 16;
    c.train.epochs = epochs;
    c.train.batch_size = 32;
    c.train.grid_m = 100;
    c.train.warmup_steps = 10;
    c.solver.steps = 10;
    c.metrics.curvature_pairs = 16;
    c.metrics.projections = 16;
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> ExperimentConfig {
        quick_config(DatasetKind::Gaussians8, 64, 1)
    }

    #[test]
    fn config_round_trip_is_a_fixed_point() {
        let c = tiny();
        let text = c.to_json();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_json(r#"{"format_version":1,"dataset":{"kind":"gaussians8","count":10,"seed":0}}"#).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.lambda_grid, vec![0.0, 0.001, 0.01, 0.1, 1.0]);
        assert_eq!(c.eval_count(), 10);
    }

    #[test]
    fn config_errors() {
        let unknown = r#"{"format_version":1,"dataset":{"kind":"gaussians8","count":10,"seed":0},"colour":1}"#;
        assert!(ExperimentConfig::from_json(unknown).unwrap_err().to_string().contains("colour"));
        let neg = r#"{"format_version":1,"dataset":{"kind":"gaussians8","count":10,"seed":0},"train":{"lambda":-1}}"#;
        assert!(ExperimentConfig::from_json(neg).unwrap_err().to_string().contains("lambda"));
        let v2 = r#"{"format_version":2,"dataset":{"kind":"gaussians8","count":10,"seed":0}}"#;
        assert!(matches!(ExperimentConfig::from_json(v2), Err(Error::VersionMismatch { expected: 1, found: 2 })));
        assert!(ExperimentConfig::from_json("{").is_err());
        let poly = r#"{"format_version":1,"dataset":{"kind":"gaussians8","count":10,"seed":0},"schedule":{"kind":"polynomial"}}"#;
        assert!(ExperimentConfig::from_json(poly).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let c = tiny();
        let (train_rows, _) = c.data().unwrap();
        let out = train_models(&c, &train_rows).unwrap();
        let ck = Checkpoint::from_state(&c, &out.state).unwrap();
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        let z = Tensor::from_rows(&[[0.3, -1.2], [2.0, 0.5]]);
        let ts = [0.25, 0.8];
        assert_eq!(back.velocity().unwrap().forward_batch(&z, &ts).unwrap(), out.state.velocity.forward_batch(&z, &ts).unwrap());
        assert_eq!(back.schedule().unwrap(), out.state.schedule);
    }

    #[test]
    fn checkpoint_corruption_and_version() {
        let c = tiny();
        let (train_rows, _) = c.data().unwrap();
        let out = train_models(&c, &train_rows).unwrap();
        let text = Checkpoint::from_state(&c, &out.state).unwrap().to_json();
        assert!(matches!(Checkpoint::from_json(&text[..text.len() / 2]), Err(Error::Config(_))));
        let bumped = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
        let err = Checkpoint::from_json(&bumped).unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { .. }));
        assert!(err.to_string().contains("format_version"));
    }

    #[test]
    fn compare_variant_layout() {
        let names: Vec<String> = compare_variants(&tiny()).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 7);
        assert_eq!(&names[..2], ["rf_uniform", "rf_logit_normal"]);
        assert_eq!(names[3], "curveflow_lambda_0.001");
    }

    #[test]
    fn gradcheck_passes_and_detects_corruption() {
        let ok = run_gradcheck(0, false).unwrap();
        assert!(ok.max_relative_error >= 0.0 && ok.max_relative_error < GRADCHECK_TOLERANCE, "{ok:?}");
        let bad = run_gradcheck(0, true).unwrap();
        assert!(bad.max_relative_error > GRADCHECK_TOLERANCE);
        assert!(!bad.worst_parameter.is_empty());
    }

    #[test]
    fn analyze_closed_forms() {
        let args = |kind| AnalyzeArgs { target: AnalyzeTarget::Kind(kind), grid_m: None, pairs: 8, seed: 0, out: None, config: None };
        assert_eq!(analyze(&args(ScheduleKind::Linear)).unwrap().determinant_integral, 0.0);
        let trig = analyze(&args(ScheduleKind::Trigonometric)).unwrap().determinant_integral;
        assert!((trig - 15.0223).abs() < 0.01 * 15.0223);
        assert!(analyze(&args(ScheduleKind::Polynomial)).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("x")), EXIT_INVALID);
        assert_eq!(exit_code(&Error::Divergence { step: 3 }), EXIT_DIVERGED);
        assert_eq!(exit_code(&Error::Diagnostic("x".into())), EXIT_DIVERGED);
        assert_eq!(exit_code(&Error::VersionMismatch { expected: 1, found: 2 }), EXIT_INVALID);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn config_round_trip_random(lambda in 0.0f64..10.0, lr in 1e-6f64..1.0, count in 1usize..5000, seed in any::<u64>(), m in 4usize..2000) {
            let mut c = tiny();
            c.train.lambda = lambda;
            c.train.base_lr = lr;
            c.train.grid_m = m;
            c.dataset.count = count;
            c.dataset.seed = seed;
            let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
