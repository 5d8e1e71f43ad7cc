//! Command-line front end: dataset generation, training, evaluation,
//! loss comparison and flux export.
//!
//! Every option resolves as flag, then `--config` JSON, then default. A
//! run manifest written next to the outputs can be passed back through
//! `--config` to repeat the run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::decomp::ModelKind;
use crate::eval::{evaluate, flux_report, table, EvalConfig, EvalError, MetricsReport, Row};
use crate::losses::{BatchSpec, LossKind, TestBasis};
use crate::odeint::IntegrationConfig;
use crate::systems::{generate_samples, AnalyticSystem, SystemError, TrajectoryDataset};
use crate::train::{train, Checkpoint, ModelSpec, TrainConfig, TrainError, TrainOutcome};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const VALIDATION_FREQ: f64 = 13.0;
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<SystemError> for CliError {
    fn from(e: SystemError) -> Self {
        match e {
            SystemError::Io { .. } => CliError::Io(e.to_string()),
            SystemError::Format(_) | SystemError::InvalidArgument(_) | SystemError::Dimension { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io { .. } => CliError::Io(e.to_string()),
            TrainError::Config(_) | TrainError::Format(_) | TrainError::Model(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Dimension { .. } | EvalError::WrongVariant(_) | EvalError::Layout { .. } | EvalError::Config(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

type Res<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "ghnn", version, about = "Learn generalized Hamiltonian dynamics from trajectory data")]
pub struct Cli {
    /// Worker threads for ensemble and evaluation parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON file of option values (or a previous run manifest).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a benchmark system and write a dataset.
    Generate(GenerateArgs),
    /// Train a model (ensemble) on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint against the analytic system.
    Eval(EvalArgs),
    /// Train one model per loss on the same data and tabulate the results.
    Compare(CompareArgs),
    /// Export per-particle energy flux of a known-H N-body checkpoint.
    Flux(FluxArgs),
}

#[derive(Args, Debug, Serialize, Default)]
pub struct GenerateArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    /// Number of initial conditions (trajectories).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ics: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    /// Sampling frequency; ignored when `--samples` is given.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub freq: Option<f64>,
    /// Samples per trajectory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Particle count for the N-body system.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Also write a 13 Hz validation set from the same initial conditions.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_out: Option<PathBuf>,
    /// Directory for per-trajectory CSV files.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields, rename_all = "snake_case")]
pub struct GenerateOpts {
    pub system: String,
    pub ics: usize,
    pub duration: f64,
    pub freq: f64,
    pub samples: Option<usize>,
    pub noise: f64,
    pub seed: u64,
    pub particles: Option<usize>,
    pub out: PathBuf,
    pub val_out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

impl Default for GenerateOpts {
    fn default() -> Self {
        GenerateOpts {
            system: "pendulum".into(),
            ics: 2,
            duration: 20.0,
            freq: 50.0,
            samples: None,
            noise: 0.1,
            seed: 0,
            particles: None,
            out: "data.json".into(),
            val_out: None,
            csv: None,
        }
    }
}

#[derive(Args, Debug, Serialize, Default)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
    /// ghnn-global, ghnn-local, ghnn-conserved, ghnn-flux, known-h, fcnn or hnn.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// weak, deriv or state.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: TrainFlags,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Training options shared by `train` and `compare`.
#[derive(Args, Debug, Serialize, Default)]
pub struct TrainFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Window length in steps; defaults to 10 for state regression, else 50.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_steps: Option<usize>,
    /// Number of Gaussian test functions.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_test: Option<usize>,
    /// Test function shape parameter γ.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape: Option<f64>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    /// RK4 sub-steps per sample interval for state regression.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub substeps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flux_weight: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curl_weight: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields, rename_all = "snake_case")]
pub struct TrainOpts {
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub model: String,
    pub loss: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub batch_steps: Option<usize>,
    pub k_test: usize,
    pub shape: f64,
    pub hidden: Vec<usize>,
    pub ensemble: usize,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub substeps: usize,
    pub flux_weight: f64,
    pub curl_weight: f64,
    pub out: PathBuf,
}

impl Default for TrainOpts {
    fn default() -> Self {
        let d = TrainConfig::default();
        let b = TestBasis::default();
        TrainOpts {
            data: None,
            val: None,
            model: ModelKind::GhnnGlobalStable.name().into(),
            loss: LossKind::Weak.name().into(),
            epochs: d.epochs,
            batch_size: d.batch.batch_size,
            batch_steps: None,
            k_test: b.k,
            shape: b.gamma,
            hidden: vec![64, 64],
            ensemble: d.ensemble_count,
            seed: 0,
            lr: d.adam.lr,
            weight_decay: d.adam.weight_decay,
            substeps: d.loss.substeps,
            flux_weight: d.loss.flux_weight,
            curl_weight: d.loss.curl_weight,
            out: "run".into(),
        }
    }
}

impl TrainOpts {
    fn config(&self, kind: LossKind) -> TrainConfig {
        let mut c = TrainConfig::for_loss(kind);
        c.epochs = self.epochs;
        c.batch = BatchSpec { batch_size: self.batch_size, steps: self.batch_steps.unwrap_or(c.batch.steps) };
        c.loss.basis = TestBasis { k: self.k_test, gamma: self.shape };
        c.loss.substeps = self.substeps;
        c.loss.flux_weight = self.flux_weight;
        c.loss.curl_weight = self.curl_weight;
        c.ensemble_count = self.ensemble;
        c.seed = self.seed;
        c.adam.lr = self.lr;
        c.adam.weight_decay = self.weight_decay;
        c
    }
}

#[derive(Args, Debug, Serialize, Default)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the system recorded in the checkpoint.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: EvalFlags,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize, Default)]
pub struct EvalFlags {
    /// Evaluation initial conditions.
    #[arg(long = "ics")]
    #[serde(rename = "eval_ics", skip_serializing_if = "Option::is_none")]
    pub eval_ics: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    #[arg(long = "eval-seed")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_seed: Option<u64>,
    /// Report derivative error only (default for chaotic systems).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub derivative_only: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields, rename_all = "snake_case")]
pub struct EvalOpts {
    pub checkpoint: Option<PathBuf>,
    pub system: Option<String>,
    pub eval_ics: usize,
    pub horizon: f64,
    pub points: usize,
    pub eval_seed: u64,
    pub derivative_only: Option<bool>,
    pub out: PathBuf,
}

impl Default for EvalOpts {
    fn default() -> Self {
        let d = EvalConfig::default();
        EvalOpts {
            checkpoint: None,
            system: None,
            eval_ics: d.n_ics,
            horizon: d.horizon,
            points: d.n_pts,
            eval_seed: 1,
            derivative_only: None,
            out: "eval".into(),
        }
    }
}

impl EvalOpts {
    fn config(&self, sys: &AnalyticSystem) -> EvalConfig {
        EvalConfig {
            n_ics: self.eval_ics,
            horizon: self.horizon,
            n_pts: self.points,
            seed: self.eval_seed,
            integration: IntegrationConfig::default(),
            derivative_only: self.derivative_only.unwrap_or(sys.is_chaotic()),
        }
    }
}

#[derive(Args, Debug, Serialize, Default)]
pub struct CompareArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
    /// Losses to compare, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub losses: Option<Vec<String>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub eval: EvalFlags,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields, rename_all = "snake_case")]
pub struct CompareOpts {
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub losses: Vec<String>,
    pub model: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub batch_steps: Option<usize>,
    pub k_test: usize,
    pub shape: f64,
    pub hidden: Vec<usize>,
    pub ensemble: usize,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub substeps: usize,
    pub flux_weight: f64,
    pub curl_weight: f64,
    pub eval_ics: usize,
    pub horizon: f64,
    pub points: usize,
    pub eval_seed: u64,
    pub derivative_only: Option<bool>,
    pub out: PathBuf,
}

impl Default for CompareOpts {
    fn default() -> Self {
        let t = TrainOpts::default();
        let e = EvalOpts::default();
        CompareOpts {
            data: None,
            val: None,
            losses: LossKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            model: ModelKind::Fcnn.name().into(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            batch_steps: None,
            k_test: t.k_test,
            shape: t.shape,
            hidden: t.hidden,
            ensemble: t.ensemble,
            seed: t.seed,
            lr: t.lr,
            weight_decay: t.weight_decay,
            substeps: t.substeps,
            flux_weight: t.flux_weight,
            curl_weight: t.curl_weight,
            eval_ics: e.eval_ics,
            horizon: e.horizon,
            points: e.points,
            eval_seed: e.eval_seed,
            derivative_only: None,
            out: "compare".into(),
        }
    }
}

impl CompareOpts {
    fn train_opts(&self) -> TrainOpts {
        TrainOpts {
            data: self.data.clone(),
            val: self.val.clone(),
            model: self.model.clone(),
            loss: String::new(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            batch_steps: self.batch_steps,
            k_test: self.k_test,
            shape: self.shape,
            hidden: self.hidden.clone(),
            ensemble: self.ensemble,
            seed: self.seed,
            lr: self.lr,
            weight_decay: self.weight_decay,
            substeps: self.substeps,
            flux_weight: self.flux_weight,
            curl_weight: self.curl_weight,
            out: self.out.clone(),
        }
    }

    fn eval_opts(&self) -> EvalOpts {
        EvalOpts {
            checkpoint: None,
            system: None,
            eval_ics: self.eval_ics,
            horizon: self.horizon,
            points: self.points,
            eval_seed: self.eval_seed,
            derivative_only: self.derivative_only,
            out: self.out.clone(),
        }
    }
}

#[derive(Args, Debug, Serialize, Default)]
pub struct FluxArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Sample index within the trajectory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub at_index: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields, rename_all = "snake_case")]
pub struct FluxOpts {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub at_index: usize,
    pub trajectory: usize,
    pub out: PathBuf,
}

impl Default for FluxOpts {
    fn default() -> Self {
        FluxOpts { checkpoint: None, data: None, at_index: 0, trajectory: 0, out: "flux".into() }
    }
}

/// Record of one invocation: resolved options, input digest, outputs and
/// timings. Only `timings` varies between identical runs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub input_hash: String,
    pub outputs: Vec<PathBuf>,
    pub timings: BTreeMap<String, f64>,
}

/// Overlays explicit flags on the config file values and fills the rest
/// from defaults.
fn resolve<T: DeserializeOwned>(flags: &impl Serialize, config: &Value) -> Res<T> {
    let mut merged = match config {
        Value::Object(m) => m.clone(),
        Value::Null => Default::default(),
        _ => return Err(CliError::Usage("config file must hold a JSON object".into())),
    };
    if let Value::Object(f) = serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))? {
        merged.extend(f);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("config: {e}")))
}

fn read_config(path: Option<&Path>) -> Res<Value> {
    let Some(p) = path else { return Ok(Value::Null) };
    let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
    Ok(match v.get("config") {
        Some(inner) if v.get("schema_version").is_some() && v.get("command").is_some() => inner.clone(),
        _ => v,
    })
}

fn write_file(path: &Path, contents: &str) -> Res<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn hash_inputs(config: &Value, files: &[&Path]) -> Res<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(config).unwrap().as_bytes());
    for f in files {
        let bytes = fs::read(f).map_err(|e| CliError::Io(format!("{}: {e}", f.display())))?;
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn write_manifest(
    path: &Path,
    command: &str,
    config: &impl Serialize,
    seed: u64,
    inputs: &[&Path],
    outputs: Vec<PathBuf>,
    timings: BTreeMap<String, f64>,
) -> Res<()> {
    let config = serde_json::to_value(config).unwrap();
    let m = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        command: command.into(),
        input_hash: hash_inputs(&config, inputs)?,
        config,
        seed,
        outputs,
        timings,
    };
    write_file(path, &serde_json::to_string_pretty(&m).unwrap())
}

fn parse_system(name: &str, particles: Option<usize>) -> Res<AnalyticSystem> {
    let sys: AnalyticSystem = name.parse().map_err(CliError::Usage)?;
    Ok(match (sys, particles) {
        (AnalyticSystem::NBody { .. }, Some(p)) => AnalyticSystem::nbody(p),
        (s, _) => s,
    })
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Res<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn load_dataset(p: &Path) -> Res<TrajectoryDataset> {
    Ok(TrajectoryDataset::load(p)?)
}

fn dataset_system(ds: &TrajectoryDataset) -> Res<AnalyticSystem> {
    ds.analytic_system().ok_or_else(|| CliError::Usage(format!("dataset system '{}' is not a known benchmark", ds.system)))
}

fn cmd_generate(o: &GenerateOpts, out: &mut dyn Write) -> Res<()> {
    let sys = parse_system(&o.system, o.particles)?;
    if o.ics == 0 {
        return Err(CliError::Usage("--ics must be at least 1".into()));
    }
    let start = Instant::now();
    let samples = o.samples.unwrap_or((o.duration * o.freq).round() as usize);
    let ics = sys.sample_ics(o.ics, o.seed);
    let ds = generate_samples(&sys, &ics, o.duration, samples, o.noise, o.seed)?;
    ds.save(&o.out)?;
    let mut outputs = vec![o.out.clone()];
    if let Some(v) = &o.val_out {
        let vs = ((samples as f64 * VALIDATION_FRACTION).round() as usize).max(3);
        let val = generate_samples(&sys, &ics, vs as f64 / VALIDATION_FREQ, vs, o.noise, o.seed.wrapping_add(1))?;
        val.save(v)?;
        outputs.push(v.clone());
    }
    if let Some(dir) = &o.csv {
        let stem = o.out.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
        outputs.extend(ds.write_csv(dir, stem)?);
    }
    let timings = BTreeMap::from([("generate".to_string(), start.elapsed().as_secs_f64())]);
    write_manifest(&manifest_beside(&o.out), "generate", o, o.seed, &[], outputs, timings)?;
    let _ = writeln!(out, "wrote {} ({} trajectories × {} samples)", o.out.display(), ds.trajectories.len(), samples);
    Ok(())
}

fn manifest_beside(p: &Path) -> PathBuf {
    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    p.with_file_name(format!("{stem}.manifest.json"))
}

fn model_spec(name: &str, sys: Option<&AnalyticSystem>, hidden: &[usize]) -> Res<ModelSpec> {
    let kind: ModelKind = name.parse().map_err(CliError::Usage)?;
    let mut spec = ModelSpec::new(kind, hidden);
    if kind == ModelKind::KnownH {
        let sys = sys.ok_or_else(|| CliError::Usage("known-h needs data from a benchmark system".into()))?;
        spec.known = Some(sys.known_energy());
    }
    Ok(spec)
}

/// Loads the training and validation data, falling back to the training
/// data for validation when none is given.
fn load_train_data(o: &TrainOpts, err: &mut dyn Write) -> Res<(TrajectoryDataset, TrajectoryDataset)> {
    let ds = load_dataset(require(&o.data, "data")?)?;
    let val = match &o.val {
        Some(v) => load_dataset(v)?,
        None => {
            let _ = writeln!(err, "warning: no --val given, validating on the training data");
            ds.clone()
        }
    };
    Ok((ds, val))
}

fn run_training(o: &TrainOpts, kind: LossKind, ds: &TrajectoryDataset, val: &TrajectoryDataset, err: &mut dyn Write) -> Res<TrainOutcome> {
    let sys = ds.analytic_system();
    let spec = model_spec(&o.model, sys.as_ref(), &o.hidden)?;
    let cfg = o.config(kind);
    let nominal = match (&sys, spec.kind) {
        (Some(s), ModelKind::GhnnFluxPrior) if o.flux_weight != 0.0 => Some(s.clone()),
        _ => None,
    };
    let rate = nominal.map(|s| move |x: &[f64]| s.energy_rate_true(x).unwrap_or(f64::NAN));
    let outcome = train(&spec, ds, val, &cfg, rate.as_ref().map(|f| f as &(dyn Fn(&[f64]) -> f64 + Sync)))?;
    for m in &outcome.members {
        if let Some(f) = &m.failure {
            let _ = writeln!(err, "warning: {} member {} stopped: {f}", kind, m.member);
        }
    }
    Ok(outcome)
}

fn cmd_train(o: &TrainOpts, out: &mut dyn Write, err: &mut dyn Write) -> Res<()> {
    let kind: LossKind = o.loss.parse().map_err(CliError::Usage)?;
    let (ds, val) = load_train_data(o, err)?;
    let start = Instant::now();
    let outcome = run_training(o, kind, &ds, &val, err)?;
    let elapsed = start.elapsed().as_secs_f64();
    let ck = o.out.join("checkpoint.json");
    write_file(&ck, &outcome.best.to_json())?;
    let hist = o.out.join("history.csv");
    write_file(&hist, &outcome.history_csv())?;
    let members = o.out.join("members.json");
    write_file(&members, &members_json(&outcome))?;
    let timings = BTreeMap::from([("train".to_string(), elapsed)]);
    let inputs: Vec<&Path> = [o.data.as_deref(), o.val.as_deref()].into_iter().flatten().collect();
    write_manifest(&o.out.join("manifest.json"), "train", o, o.seed, &inputs, vec![ck.clone(), hist, members], timings)?;
    let _ = writeln!(
        out,
        "wrote {} (member {}, val loss {:.4e}, hash {})",
        ck.display(),
        outcome.selected,
        outcome.best.meta.final_val_loss,
        &outcome.best.hash()[..12]
    );
    Ok(())
}

fn members_json(o: &TrainOutcome) -> String {
    let v: Vec<Value> = o
        .members
        .iter()
        .map(|m| {
            serde_json::json!({
                "member": m.member,
                "epochs": m.history.len(),
                "initial_val_loss": m.initial_val_loss,
                "final_val_loss": m.final_val_loss(),
                "failure": m.failure,
                "selected": m.member == o.selected,
            })
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({ "schema_version": 1, "members": v })).unwrap()
}

fn warn_divergence(r: &MetricsReport, label: &str, err: &mut dyn Write) {
    if r.diverged {
        let _ = writeln!(err, "warning: {label}: {} of {} trajectories diverged", r.divergent_count, r.per_ic.len());
    }
}

fn cmd_eval(o: &EvalOpts, out: &mut dyn Write, err: &mut dyn Write) -> Res<()> {
    let path = require(&o.checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(path)?;
    let sys = parse_system(o.system.as_deref().unwrap_or(&ck.meta.system), None)?;
    let sys = match (&sys, ck.model.n) {
        (AnalyticSystem::NBody { .. }, n) if n % 4 == 0 => AnalyticSystem::nbody(n / 4),
        _ => sys,
    };
    let start = Instant::now();
    let report = evaluate(&ck.model, &sys, ck.model_kind.name(), &o.config(&sys))?;
    warn_divergence(&report, ck.model_kind.name(), err);
    let rj = o.out.join("report.json");
    let rt = o.out.join("report.txt");
    write_file(&rj, &report.to_json())?;
    write_file(&rt, &report.to_table())?;
    let timings = BTreeMap::from([("eval".to_string(), start.elapsed().as_secs_f64())]);
    write_manifest(&o.out.join("manifest.json"), "eval", o, o.eval_seed, &[path], vec![rj, rt], timings)?;
    let _ = write!(out, "{}", report.to_table());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CompareReport {
    schema_version: u32,
    system: String,
    model: String,
    rows: Vec<Row>,
    checkpoints: BTreeMap<String, String>,
    reports: Vec<MetricsReport>,
}

fn cmd_compare(o: &CompareOpts, out: &mut dyn Write, err: &mut dyn Write) -> Res<()> {
    let kinds: Vec<LossKind> = o.losses.iter().map(|l| l.parse().map_err(CliError::Usage)).collect::<Res<_>>()?;
    if kinds.is_empty() {
        return Err(CliError::Usage("--losses is empty".into()));
    }
    let topts = o.train_opts();
    let (ds, val) = load_train_data(&topts, err)?;
    let sys = dataset_system(&ds)?;
    let ecfg = o.eval_opts().config(&sys);
    let mut rows = Vec::new();
    let mut timed = Vec::new();
    let mut reports = Vec::new();
    let mut checkpoints = BTreeMap::new();
    let mut timings = BTreeMap::new();
    let mut outputs = Vec::new();
    for kind in kinds {
        let start = Instant::now();
        let outcome = run_training(&topts, kind, &ds, &val, err)?;
        let secs = start.elapsed().as_secs_f64();
        timings.insert(format!("train_{kind}"), secs);
        let ck = o.out.join(format!("checkpoint_{kind}.json"));
        write_file(&ck, &outcome.best.to_json())?;
        let hist = o.out.join(format!("history_{kind}.csv"));
        write_file(&hist, &outcome.history_csv())?;
        outputs.extend([ck, hist]);
        checkpoints.insert(kind.name().to_string(), outcome.best.hash());
        let est = Instant::now();
        let label = format!("{} ({kind})", o.model);
        let mut report = evaluate(&outcome.best.model, &sys, &label, &ecfg)?;
        timings.insert(format!("eval_{kind}"), est.elapsed().as_secs_f64());
        warn_divergence(&report, &label, err);
        rows.push(Row::from_report(format!("{kind}"), &report));
        report.train_time = Some(secs);
        timed.push(Row::from_report(format!("{kind}"), &report));
        report.train_time = None;
        reports.push(report);
    }
    let report = CompareReport { schema_version: 1, system: sys.name().into(), model: o.model.clone(), rows: rows.clone(), checkpoints, reports };
    let rj = o.out.join("report.json");
    let rt = o.out.join("report.txt");
    let tt = o.out.join("table.txt");
    let tj = o.out.join("timings.json");
    write_file(&rj, &serde_json::to_string_pretty(&report).unwrap())?;
    write_file(&rt, &table(&rows, false))?;
    let with_time = table(&timed, true);
    write_file(&tt, &with_time)?;
    write_file(&tj, &serde_json::to_string_pretty(&timings).unwrap())?;
    outputs.extend([rj, rt, tt, tj]);
    let inputs: Vec<&Path> = [o.data.as_deref(), o.val.as_deref()].into_iter().flatten().collect();
    write_manifest(&o.out.join("manifest.json"), "compare", o, o.seed, &inputs, outputs, timings)?;
    let _ = write!(out, "{with_time}");
    Ok(())
}

fn cmd_flux(o: &FluxOpts, out: &mut dyn Write) -> Res<()> {
    let cpath = require(&o.checkpoint, "checkpoint")?;
    let dpath = require(&o.data, "data")?;
    let ck = Checkpoint::load(cpath)?;
    if ck.model_kind != ModelKind::KnownH {
        return Err(CliError::Usage(format!("flux needs a known-h checkpoint, got {}", ck.model_kind)));
    }
    let ds = load_dataset(dpath)?;
    let tr = ds
        .trajectories
        .get(o.trajectory)
        .ok_or_else(|| CliError::Usage(format!("trajectory {} out of range", o.trajectory)))?;
    let x = tr
        .states
        .get(o.at_index)
        .ok_or_else(|| CliError::Usage(format!("index {} out of range ({} samples)", o.at_index, tr.len())))?;
    let start = Instant::now();
    let rep = flux_report(&ck.model, x)?;
    let fj = o.out.join("flux.json");
    let fc = o.out.join("flux.csv");
    write_file(&fj, &rep.to_json())?;
    write_file(&fc, &rep.to_csv())?;
    let timings = BTreeMap::from([("flux".to_string(), start.elapsed().as_secs_f64())]);
    write_manifest(&o.out.join("manifest.json"), "flux", o, 0, &[cpath, dpath], vec![fj, fc], timings)?;
    let _ = writeln!(out, "energy rate {:.6e}, {} particles", rep.energy_rate, rep.particles.len());
    Ok(())
}

fn dispatch(cli: Cli, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Res<()> {
    let config = read_config(cli.config.as_deref())?;
    match cli.command {
        Command::Generate(a) => cmd_generate(&resolve(&a, &config)?, out),
        Command::Train(a) => cmd_train(&resolve(&a, &config)?, out, err),
        Command::Eval(a) => cmd_eval(&resolve(&a, &config)?, out, err),
        Command::Compare(a) => cmd_compare(&resolve(&a, &config)?, out, err),
        Command::Flux(a) => cmd_flux(&resolve(&a, &config)?, out),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_with<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    let pool = match cli.threads {
        Some(0) => {
            let _ = writeln!(err, "usage error: --threads must be at least 1");
            return 2;
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "numerical failure: thread pool: {e}");
            return 4;
        }
    };
    match pool.install(|| dispatch(cli, out, err)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.code()
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}
