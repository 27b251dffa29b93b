//! Command-line front end.
//!
//! Every subcommand writes its artifacts into `--out` together with
//! `run.json` (the fully resolved configuration) and `manifest.json`
//! (SHA-256 of every artifact). JSON artifacts additionally carry
//! `version`, `seed` and `config_hash` keys. Passing a `run.json` back via
//! `--config` reproduces the run; explicit flags override its values.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::calibration::{fit_recalx, fit_temperature, CalibratorMeta, ReCalXCalibrator};
use crate::data::{
    feature_means, load_csv_dataset, make_synthetic, split, Dataset, FiniteJoint, GeneratorKind, GeneratorSpec, SplitSpec,
    Standardizer,
};
use crate::evaluation::{drift_scale_sweep, roar, sensitivity};
use crate::explainers::{
    explain, explain_dataset, explained_rows, predicted_class, summarize, write_attributions_csv,
    ExplainerSpec, GlobalImportance, DEFAULT_RIDGE,
};
use crate::metrics::{
    decomposition_report, default_levels, exact_decomposition, per_level_profile,
    ConditionalEstimatorSpec, DEFAULT_BANDWIDTH,
};
use crate::model::{accuracy, bayes_restricted_oracle, mean_cross_entropy, train_mlp, Classifier, TrainConfig};
use crate::perturbation::{Coalition, PerturbationStrategy};

pub const WORKERS_ENV: &str = "RECALX_WORKERS";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

// ---------------------------------------------------------------------------
// Arguments
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "recalx", version, about = "Perturbation-level recalibration for removal-based explanations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic dataset from a generator spec
    GenData(GenDataArgs),
    /// Train an MLP, or build a Bayes oracle for a finite joint
    Train(TrainArgs),
    /// Fit a temperature-scaling or ReCalX calibrator
    Calibrate(CalibrateArgs),
    /// Per-level calibration-error profile
    Measure(MeasureArgs),
    /// Attributions for a set of samples
    Explain(ExplainArgs),
    /// Remove-and-retrain curve for a feature ranking
    EvalRoar(RoarArgs),
    /// Explanation sensitivity under small input changes
    EvalSensitivity(SensitivityArgs),
    /// Exact predictive-power decomposition for every coalition
    VerifyDecomposition(DecompositionArgs),
    /// Explanation-drift bound on a finite joint
    VerifyBound(BoundArgs),
}

/// Flags shared by every subcommand; none of them enters `run.json`
/// except the seed and label column.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct Common {
    /// Global seed; every component derives its stream from it
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Resolved configuration of an earlier run (its run.json)
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Worker threads (default 1; RECALX_WORKERS overrides)
    #[arg(long)]
    #[serde(skip)]
    pub workers: Option<usize>,
    /// Name of the label column in CSV files
    #[arg(long)]
    pub label_column: Option<String>,
    /// Number of classes in CSV files
    #[arg(long)]
    pub n_classes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMethod {
    Ts,
    Recalx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplainMethod {
    Shapley,
    Kernelshap,
    Lime,
    Ablation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    ExactGroupby,
    Kernel,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    /// Generator spec JSON ({"kind": "finite"|"planted"|"moons", "version": 1, ...})
    #[arg(long)]
    pub generator: Option<PathBuf>,
    /// Number of samples
    #[arg(long)]
    pub n: Option<usize>,
    /// Train/val/test fractions, e.g. 0.6,0.2,0.2
    #[arg(long)]
    pub split: Option<String>,
    /// Z-score every feature with statistics of the train part (or of all
    /// rows when not splitting); writes standardizer.json
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub standardize: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Training CSV
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Optional held-out CSV for reported metrics
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Hidden layer sizes, e.g. 32,16
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Build the exact Bayes oracle of --joint instead of training
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub bayes_oracle: Option<bool>,
    /// Finite joint JSON (for --bayes-oracle)
    #[arg(long)]
    pub joint: Option<PathBuf>,
    /// Perturbation strategy the oracle is tabulated for
    #[arg(long)]
    pub strategy: Option<String>,
    /// Multiply the model's logits by this factor
    #[arg(long)]
    pub scale_logits: Option<f64>,
    /// Only scale when the perturbation level exceeds this value
    #[arg(long)]
    pub scale_above_level: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Validation CSV
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<CalibrationMethod>,
    /// Number of perturbation-level bins (recalx)
    #[arg(long)]
    pub bins: Option<usize>,
    /// zero | mean | noise:SIGMA | path to a strategy JSON
    #[arg(long)]
    pub strategy: Option<String>,
    /// Perturbed copies per validation point
    #[arg(long)]
    pub reps: Option<usize>,
    /// For --method ts: fit on unperturbed data instead of the perturbed pool
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub unperturbed: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct MeasureArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub calibrator: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<String>,
    /// Perturbation levels, e.g. 0,0.25,0.5 (default: 0, 0.1, ..., 1)
    #[arg(long)]
    pub levels: Option<String>,
    /// Coalitions per sample and level
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, value_enum)]
    pub estimator: Option<EstimatorKind>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub leave_one_out: Option<bool>,
    /// Also write long-format plotdata.csv
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub emit_plotdata: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ExplainerArgs {
    #[arg(long, value_enum)]
    pub method: Option<ExplainMethod>,
    /// Coalition budget for kernelshap and lime
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub kernel_width: Option<f64>,
    #[arg(long)]
    pub ridge: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub calibrator: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<String>,
    /// Number of rows to explain (default: all)
    #[arg(long)]
    pub n_explain: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub explainer: ExplainerArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct RoarArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Feature ranking, most important first, e.g. 2,0,1
    #[arg(long)]
    pub ranking: Option<String>,
    /// Take the ranking from an `explain` global.json instead
    #[arg(long)]
    pub global: Option<PathBuf>,
    /// Removal counts (default 0..d-1)
    #[arg(long)]
    pub ks: Option<String>,
    /// Retrain seeds (default 0,1,2)
    #[arg(long)]
    pub seeds: Option<String>,
    /// Train/val/test fractions (default 0.6,0.2,0.2)
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub calibrator: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<String>,
    /// Rows to probe (default 50)
    #[arg(long)]
    pub n_explain: Option<usize>,
    /// L-infinity probe radius (default 0.05)
    #[arg(long)]
    pub radius: Option<f64>,
    /// Probes per row (default 10)
    #[arg(long)]
    pub probes: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub explainer: ExplainerArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct DecompositionArgs {
    /// Finite joint JSON; enables exact enumeration
    #[arg(long)]
    pub joint: Option<PathBuf>,
    /// Sample CSV for estimation mode (when no joint is given)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model to decompose (default: the joint's Bayes oracle)
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub calibrator: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct BoundArgs {
    #[arg(long)]
    pub joint: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Logit scales of the miscalibrated oracle (default 1,2,4,8)
    #[arg(long)]
    pub scales: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

// ---------------------------------------------------------------------------
// Configuration resolution
// ---------------------------------------------------------------------------

/// Overlays explicitly given flags on the `config` object of a run.json.
fn merge_config<A: Serialize + DeserializeOwned>(args: &A, command: &str, config: Option<&Path>) -> CliResult<A> {
    let explicit = serde_json::to_value(args).map_err(|e| runtime(e.to_string()))?;
    let Some(path) = config else {
        return serde_json::from_value(explicit).map_err(|e| runtime(e.to_string()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let run: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(c) = run.get("command").and_then(Value::as_str) {
        if c != command {
            return Err(usage(format!("{} was written by `{c}`, not `{command}`", path.display())));
        }
    }
    let mut merged = run.get("config").and_then(Value::as_object).cloned().unwrap_or_default();
    for (k, v) in explicit.as_object().into_iter().flatten() {
        if !v.is_null() {
            merged.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("invalid configuration: {e}")))
}

fn config_hash(config: &Value) -> String {
    hex(&Sha256::digest(config.to_string().as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| usage(format!("cannot parse `{p}` in --{what}"))))
        .collect()
}

fn parse_fractions(s: &str) -> CliResult<(f64, f64, f64)> {
    match parse_list::<f64>(s, "split")?.as_slice() {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(usage("--split needs three comma-separated fractions")),
    }
}

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    v.as_ref().ok_or_else(|| usage(format!("--{flag} is required")))
}

/// `zero`, `mean` (feature means of `data`), `noise:SIGMA`,
/// `baseline:v1,v2,...` or a path to a strategy JSON.
pub fn parse_strategy(spec: &str, data: Option<&Dataset>) -> CliResult<PerturbationStrategy> {
    let strategy = match spec {
        "zero" => PerturbationStrategy::ZeroBaseline,
        "mean" => PerturbationStrategy::MeanReplacement {
            mu: feature_means(data.ok_or_else(|| usage("strategy `mean` needs a dataset"))?),
        },
        s if s.starts_with("noise:") => PerturbationStrategy::GaussianNoise {
            sigma: s["noise:".len()..].parse().map_err(|_| usage(format!("bad noise level in `{s}`")))?,
        },
        s if s.starts_with("baseline:") => PerturbationStrategy::FixedBaseline {
            baseline: parse_list(&s["baseline:".len()..], "strategy")?,
        },
        path => {
            let text = std::fs::read_to_string(path).map_err(|_| {
                usage(format!(
                    "unknown strategy `{path}`; expected zero, mean, noise:SIGMA, baseline:V,.. or a JSON file"
                ))
            })?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{path}: {e}")))?
        }
    };
    Ok(strategy)
}

// ---------------------------------------------------------------------------
// Run context
// ---------------------------------------------------------------------------

struct Run {
    out: PathBuf,
    command: &'static str,
    seed: u64,
    config: Value,
    hash: String,
    artifacts: Vec<(String, String)>,
}

impl Run {
    fn start<A: Serialize>(command: &'static str, resolved: &A, common: &Common) -> CliResult<Self> {
        let out = require(&common.out, "out")?.clone();
        std::fs::create_dir_all(&out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
        let config = serde_json::to_value(resolved).map_err(|e| runtime(e.to_string()))?;
        Ok(Self {
            out,
            command,
            seed: common.seed.unwrap_or(0),
            hash: config_hash(&config),
            config,
            artifacts: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
        self.artifacts.push((name.to_owned(), hex(&Sha256::digest(bytes))));
        Ok(())
    }

    fn write_text(&mut self, name: &str, text: &str) -> CliResult<()> {
        self.write_bytes(name, text.as_bytes())
    }

    /// Writes a JSON object stamped with version, seed and config hash.
    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut v = serde_json::to_value(value).map_err(|e| runtime(e.to_string()))?;
        if let Value::Object(map) = &mut v {
            map.entry("version").or_insert(json!(FORMAT_VERSION));
            map.entry("seed").or_insert(json!(self.seed));
            map.insert("config_hash".into(), json!(self.hash));
        }
        let text = serde_json::to_string_pretty(&v).map_err(|e| runtime(e.to_string()))?;
        self.write_text(name, &(text + "\n"))
    }

    /// Copies a dataset into the run directory, recording its hash.
    fn write_dataset(&mut self, name: &str, ds: &Dataset, label_column: &str) -> CliResult<()> {
        ds.write_csv(&self.path(name), label_column)?;
        let bytes = std::fs::read(self.path(name)).map_err(|e| runtime(e.to_string()))?;
        self.artifacts.push((name.to_owned(), hex(&Sha256::digest(&bytes))));
        Ok(())
    }

    fn finish(mut self) -> CliResult<()> {
        let run = json!({
            "version": FORMAT_VERSION,
            "command": self.command,
            "seed": self.seed,
            "config_hash": self.hash,
            "config": self.config,
        });
        let text = serde_json::to_string_pretty(&run).map_err(|e| runtime(e.to_string()))? + "\n";
        std::fs::write(self.path("run.json"), text).map_err(|e| runtime(e.to_string()))?;
        let artifacts: Map<String, Value> =
            self.artifacts.drain(..).map(|(k, v)| (k, Value::String(v))).collect();
        let manifest = json!({
            "version": FORMAT_VERSION,
            "recalx_version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "seed": self.seed,
            "config_hash": self.hash,
            "artifacts": artifacts,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| runtime(e.to_string()))? + "\n";
        std::fs::write(self.path("manifest.json"), text).map_err(|e| runtime(e.to_string()))
    }
}

fn label_column(c: &Common) -> &str {
    c.label_column.as_deref().unwrap_or("label")
}

fn load_data(path: &Path, common: &Common) -> CliResult<Dataset> {
    let load = load_csv_dataset(path, label_column(common), common.n_classes.unwrap_or(2))?;
    if load.rejected_rows > 0 {
        eprintln!("{}: dropped {} rows with non-finite values", path.display(), load.rejected_rows);
    }
    Ok(load.dataset)
}

fn load_calibrator(path: Option<&PathBuf>) -> CliResult<Option<ReCalXCalibrator>> {
    Ok(match path {
        Some(p) => Some(ReCalXCalibrator::load(p)?),
        None => None,
    })
}

fn load_joint(path: &Path) -> CliResult<FiniteJoint> {
    let text = std::fs::read_to_string(path).map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    // accept a bare joint, a stamped artifact, or a finite generator spec
    let inner = v.get("joint").cloned().unwrap_or(v);
    let joint: FiniteJoint = serde_json::from_value(inner).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    joint.validate()?;
    Ok(joint)
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn gen_data(args: GenDataArgs) -> CliResult<()> {
    let args = GenDataArgs {
        n: Some(args.n.unwrap_or(1000)),
        standardize: Some(args.standardize.unwrap_or(false)),
        ..args
    };
    let mut run = Run::start("gen-data", &args, &args.common)?;
    let spec_path = require(&args.generator, "generator")?;
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| usage(format!("cannot read {}: {e}", spec_path.display())))?;
    let spec: GeneratorSpec = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", spec_path.display())))?;
    let standardize = args.standardize == Some(true);
    if standardize && matches!(spec.kind, GeneratorKind::Finite { .. }) {
        return Err(usage("--standardize would move samples off the finite joint's support"));
    }
    let (ds, joint) = make_synthetic(&spec, args.n.unwrap_or(1000), run.seed)?;
    let parts = match &args.split {
        Some(fr) => Some(split(&ds, &SplitSpec { fractions: parse_fractions(fr)?, seed: run.seed })?),
        None => None,
    };
    let scaler = standardize.then(|| Standardizer::fit(parts.as_ref().map_or(&ds, |p| &p.0)));
    let scaled = |d: &Dataset| scaler.as_ref().map_or_else(|| d.clone(), |s| s.apply(d));
    let label = label_column(&args.common).to_owned();
    run.write_dataset("data.csv", &scaled(&ds), &label)?;
    if let Some(j) = &joint {
        run.write_json("joint.json", &json!({ "joint": j }))?;
    }
    if let Some(s) = &scaler {
        run.write_json("standardizer.json", s)?;
    }
    if let Some((train, val, test)) = &parts {
        let train = scaled(train);
        run.write_dataset("train.csv", &train, &label)?;
        run.write_dataset("val.csv", &scaled(val), &label)?;
        run.write_dataset("test.csv", &scaled(test), &label)?;
        let strategy = PerturbationStrategy::MeanReplacement { mu: feature_means(&train) };
        run.write_json("strategy_mean.json", &strategy)?;
    }
    run.finish()
}

fn train(args: TrainArgs) -> CliResult<()> {
    let oracle = args.bayes_oracle.unwrap_or(false);
    let defaults = TrainConfig::default();
    let args = if oracle {
        TrainArgs { bayes_oracle: Some(true), strategy: Some(args.strategy.clone().unwrap_or_else(|| "zero".into())), ..args }
    } else {
        TrainArgs {
            bayes_oracle: Some(false),
            hidden: Some(args.hidden.clone().unwrap_or_else(|| "16".into())),
            epochs: Some(args.epochs.unwrap_or(defaults.epochs)),
            batch_size: Some(args.batch_size.unwrap_or(defaults.batch_size)),
            lr: Some(args.lr.unwrap_or(defaults.learning_rate)),
            weight_decay: Some(args.weight_decay.unwrap_or(defaults.weight_decay)),
            momentum: Some(args.momentum.unwrap_or(defaults.momentum)),
            ..args
        }
    };
    let mut run = Run::start("train", &args, &args.common)?;
    let (model, train_data) = if oracle {
        let joint = load_joint(require(&args.joint, "joint")?)?;
        let strategy = parse_strategy(args.strategy.as_deref().unwrap_or("zero"), None)?;
        (bayes_restricted_oracle(&joint, &strategy)?, None)
    } else {
        let data = load_data(require(&args.data, "data")?, &args.common)?;
        let cfg = TrainConfig {
            hidden_sizes: parse_list(args.hidden.as_deref().unwrap_or("16"), "hidden")?,
            epochs: args.epochs.unwrap_or(defaults.epochs),
            batch_size: args.batch_size.unwrap_or(defaults.batch_size),
            learning_rate: args.lr.unwrap_or(defaults.learning_rate),
            weight_decay: args.weight_decay.unwrap_or(defaults.weight_decay),
            momentum: args.momentum.unwrap_or(defaults.momentum),
            seed: run.seed,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        (train_mlp(&data, &cfg)?, Some(data))
    };
    let model = match (args.scale_logits, args.scale_above_level) {
        (Some(c), Some(level)) => Classifier::level_scaled(model, c, level),
        (Some(c), None) => Classifier::scaled(model, c),
        (None, Some(_)) => return Err(usage("--scale-above-level needs --scale-logits")),
        (None, None) => model,
    };
    run.write_json("model.json", &serde_json::from_str::<Value>(&model.to_json()?).map_err(|e| runtime(e.to_string()))?)?;
    let mut metrics = Map::new();
    if let Some(data) = &train_data {
        metrics.insert("train_accuracy".into(), json!(accuracy(&model, data)?));
        metrics.insert("train_loss".into(), json!(mean_cross_entropy(&model, data)?));
    }
    if let Some(val) = &args.val {
        let data = load_data(val, &args.common)?;
        metrics.insert("val_accuracy".into(), json!(accuracy(&model, &data)?));
        metrics.insert("val_loss".into(), json!(mean_cross_entropy(&model, &data)?));
    }
    metrics.insert("kind".into(), json!(model.kind()));
    run.write_json("metrics.json", &Value::Object(metrics))?;
    run.finish()
}

fn calibrate(args: CalibrateArgs) -> CliResult<()> {
    let method = *require(&args.method, "method")?;
    let args = CalibrateArgs {
        bins: Some(match method {
            CalibrationMethod::Ts => 1,
            CalibrationMethod::Recalx => args.bins.unwrap_or(10),
        }),
        strategy: Some(args.strategy.clone().unwrap_or_else(|| "zero".into())),
        reps: Some(args.reps.unwrap_or(5)),
        unperturbed: Some(args.unperturbed.unwrap_or(false)),
        ..args
    };
    if method == CalibrationMethod::Ts && args.bins != Some(1) {
        return Err(usage("--method ts fits a single temperature; --bins must be 1"));
    }
    let mut run = Run::start("calibrate", &args, &args.common)?;
    let model = Classifier::load(require(&args.model, "model")?)?;
    let val = load_data(require(&args.data, "data")?, &args.common)?;
    let strategy = parse_strategy(args.strategy.as_deref().unwrap_or("zero"), Some(&val))?;
    if method == CalibrationMethod::Ts && args.unperturbed == Some(true) {
        let fit = fit_temperature(&model, &val)?;
        let meta = CalibratorMeta {
            strategy: strategy.name().into(),
            seed: run.seed,
            validation_size: val.len(),
            bin_counts: vec![val.len()],
        };
        let calib = ReCalXCalibrator::uniform(fit.temperature, meta)?;
        run.write_text("calibrator.json", &(calib.to_json()? + "\n"))?;
        run.write_json("fit_report.json", &fit)?;
    } else {
        let bins = args.bins.unwrap_or(10);
        let (calib, report) = fit_recalx(&model, &val, &strategy, bins, args.reps.unwrap_or(5), run.seed)?;
        run.write_text("calibrator.json", &(calib.to_json()? + "\n"))?;
        run.write_json("fit_report.json", &report)?;
    }
    run.finish()
}

fn estimator_from(kind: EstimatorKind, bandwidth: f64, loo: bool) -> ConditionalEstimatorSpec {
    match kind {
        EstimatorKind::ExactGroupby => ConditionalEstimatorSpec::ExactGroupby,
        EstimatorKind::Kernel => ConditionalEstimatorSpec::Kernel { bandwidth, leave_one_out: loo },
    }
}

fn measure(args: MeasureArgs) -> CliResult<()> {
    let levels_default = default_levels().iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    let args = MeasureArgs {
        strategy: Some(args.strategy.clone().unwrap_or_else(|| "zero".into())),
        levels: Some(args.levels.clone().unwrap_or(levels_default)),
        reps: Some(args.reps.unwrap_or(1)),
        estimator: Some(args.estimator.unwrap_or(EstimatorKind::Kernel)),
        bandwidth: Some(args.bandwidth.unwrap_or(DEFAULT_BANDWIDTH)),
        leave_one_out: Some(args.leave_one_out.unwrap_or(true)),
        emit_plotdata: Some(args.emit_plotdata.unwrap_or(false)),
        ..args
    };
    let mut run = Run::start("measure", &args, &args.common)?;
    let model = Classifier::load(require(&args.model, "model")?)?;
    let calib = load_calibrator(args.calibrator.as_ref())?;
    let data = load_data(require(&args.data, "data")?, &args.common)?;
    let strategy = parse_strategy(args.strategy.as_deref().unwrap_or("zero"), Some(&data))?;
    let levels: Vec<f64> = parse_list(args.levels.as_deref().unwrap_or_default(), "levels")?;
    let est = estimator_from(
        args.estimator.unwrap_or(EstimatorKind::Kernel),
        args.bandwidth.unwrap_or(DEFAULT_BANDWIDTH),
        args.leave_one_out.unwrap_or(true),
    );
    let reps = args.reps.unwrap_or(1);
    let profile = per_level_profile(&model, calib.as_ref(), &data, &strategy, &levels, reps, run.seed, &est)?;
    run.write_json("profile.json", &profile)?;
    run.write_text("profile.csv", &profile.to_csv())?;

    let mut rows = vec![("uncalibrated", profile.clone())];
    if calib.is_some() {
        let raw = per_level_profile(&model, None, &data, &strategy, &levels, reps, run.seed, &est)?;
        rows = vec![("uncalibrated", raw), ("calibrated", profile)];
    }
    let mut table = String::from("model,calibration,strategy,ce_avg,ce_max\n");
    for (name, p) in &rows {
        table.push_str(&format!("{},{name},{},{},{}\n", model.kind(), strategy.name(), p.ce_avg, p.ce_max));
    }
    run.write_text("table.csv", &table)?;
    if args.emit_plotdata == Some(true) {
        let mut plot = String::from("series,level,ce\n");
        for (name, p) in &rows {
            for (l, ce) in p.levels.iter().zip(&p.ce_per_level) {
                plot.push_str(&format!("{name},{l},{ce}\n"));
            }
        }
        run.write_text("plotdata.csv", &plot)?;
    }
    run.finish()
}

fn resolve_explainer(e: ExplainerArgs, d: usize) -> CliResult<(ExplainerArgs, ExplainerSpec)> {
    let method = e.method.ok_or_else(|| usage("--method is required (shapley, kernelshap, lime, ablation)"))?;
    let n = e.n.unwrap_or(200);
    let resolved = match method {
        ExplainMethod::Kernelshap => ExplainerArgs { n: Some(n), ..e },
        ExplainMethod::Lime => ExplainerArgs {
            n: Some(n),
            kernel_width: Some(e.kernel_width.unwrap_or(0.75 * (d as f64).sqrt())),
            ridge: Some(e.ridge.unwrap_or(DEFAULT_RIDGE)),
            ..e
        },
        _ => e,
    };
    let spec = match method {
        ExplainMethod::Shapley => ExplainerSpec::Shapley,
        ExplainMethod::Kernelshap => ExplainerSpec::KernelShap { n_samples: n },
        ExplainMethod::Lime => ExplainerSpec::Lime {
            n_samples: n,
            kernel_width: resolved.kernel_width,
            ridge_lambda: resolved.ridge.unwrap_or(DEFAULT_RIDGE),
        },
        ExplainMethod::Ablation => ExplainerSpec::Ablation,
    };
    Ok((resolved, spec))
}

fn explain_cmd(args: ExplainArgs) -> CliResult<()> {
    let model = Classifier::load(require(&args.model, "model")?)?;
    let (explainer, spec) = resolve_explainer(args.explainer.clone(), model.input_dim())?;
    let data = load_data(require(&args.data, "data")?, &args.common)?;
    let args = ExplainArgs {
        strategy: Some(args.strategy.clone().unwrap_or_else(|| "zero".into())),
        n_explain: Some(args.n_explain.unwrap_or(data.len())),
        explainer,
        ..args
    };
    let mut run = Run::start("explain", &args, &args.common)?;
    let calib = load_calibrator(args.calibrator.as_ref())?;
    let strategy = parse_strategy(args.strategy.as_deref().unwrap_or("zero"), Some(&data))?;
    let explained = explain_dataset(
        &model,
        calib.as_ref(),
        &data,
        &spec,
        &strategy,
        args.n_explain.unwrap_or(data.len()),
        run.seed,
    )?;
    let attr = run.path("attributions.csv");
    write_attributions_csv(&attr, &explained)?;
    let bytes = std::fs::read(&attr).map_err(|e| runtime(e.to_string()))?;
    run.artifacts.push(("attributions.csv".into(), hex(&Sha256::digest(&bytes))));
    let global: GlobalImportance = summarize(&explained, spec.name(), run.seed);
    run.write_json("global.json", &global)?;
    run.finish()
}

fn roar_cmd(args: RoarArgs) -> CliResult<()> {
    let data = load_data(require(&args.data, "data")?, &args.common)?;
    let d = data.n_features();
    let defaults = TrainConfig::default();
    let ranking: Vec<usize> = match (&args.ranking, &args.global) {
        (Some(r), _) => parse_list(r, "ranking")?,
        (None, Some(g)) => {
            let text = std::fs::read_to_string(g).map_err(|e| usage(format!("cannot read {}: {e}", g.display())))?;
            let parsed: GlobalImportance =
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", g.display())))?;
            parsed.ranking
        }
        (None, None) => return Err(usage("one of --ranking or --global is required")),
    };
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let args = RoarArgs {
        ranking: Some(join(&ranking)),
        global: None,
        ks: Some(args.ks.clone().unwrap_or_else(|| join(&(0..d).collect::<Vec<_>>()))),
        seeds: Some(args.seeds.clone().unwrap_or_else(|| "0,1,2".into())),
        split: Some(args.split.clone().unwrap_or_else(|| "0.6,0.2,0.2".into())),
        hidden: Some(args.hidden.clone().unwrap_or_else(|| "16".into())),
        epochs: Some(args.epochs.unwrap_or(defaults.epochs)),
        batch_size: Some(args.batch_size.unwrap_or(defaults.batch_size)),
        lr: Some(args.lr.unwrap_or(defaults.learning_rate)),
        ..args
    };
    let mut run = Run::start("eval-roar", &args, &args.common)?;
    let cfg = TrainConfig {
        hidden_sizes: parse_list(args.hidden.as_deref().unwrap_or("16"), "hidden")?,
        epochs: args.epochs.unwrap_or(defaults.epochs),
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: args.lr.unwrap_or(defaults.learning_rate),
        ..defaults
    };
    let ks: Vec<usize> = parse_list(args.ks.as_deref().unwrap_or_default(), "ks")?;
    let seeds: Vec<u64> = parse_list(args.seeds.as_deref().unwrap_or_default(), "seeds")?;
    let split_spec = SplitSpec { fractions: parse_fractions(args.split.as_deref().unwrap_or_default())?, seed: run.seed };
    let curve = roar(&data, &split_spec, &ranking, &ks, &cfg, &seeds)?;
    run.write_text("roar.csv", &curve.to_csv())?;
    run.write_json("roar.json", &curve)?;
    run.finish()
}

fn sensitivity_cmd(args: SensitivityArgs) -> CliResult<()> {
    let model = Classifier::load(require(&args.model, "model")?)?;
    let (explainer, spec) = resolve_explainer(args.explainer.clone(), model.input_dim())?;
    let data = load_data(require(&args.data, "data")?, &args.common)?;
    let args = SensitivityArgs {
        strategy: Some(args.strategy.clone().unwrap_or_else(|| "zero".into())),
        n_explain: Some(args.n_explain.unwrap_or(50).min(data.len())),
        radius: Some(args.radius.unwrap_or(crate::evaluation::DEFAULT_RADIUS)),
        probes: Some(args.probes.unwrap_or(crate::evaluation::DEFAULT_PROBES)),
        explainer,
        ..args
    };
    let mut run = Run::start("eval-sensitivity", &args, &args.common)?;
    let calib = load_calibrator(args.calibrator.as_ref())?;
    let strategy = parse_strategy(args.strategy.as_deref().unwrap_or("zero"), Some(&data))?;
    let rows = explained_rows(data.len(), args.n_explain.unwrap_or(50), run.seed)?;
    let radius = args.radius.unwrap_or(crate::evaluation::DEFAULT_RADIUS);
    let probes = args.probes.unwrap_or(crate::evaluation::DEFAULT_PROBES);
    // the target stays the predicted class of the unperturbed row
    let per_row = rows
        .par_iter()
        .map(|&i| {
            let target = predicted_class(&model, data.row(i))?;
            let f = |x: &[f64], seed: u64| -> crate::Result<Vec<f64>> {
                Ok(explain(&model, calib.as_ref(), x, target, &strategy, &spec, seed)?.values)
            };
            sensitivity(f, data.row(i), radius, probes, crate::rng::mix(run.seed, &[i as u64]))
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let avg: Vec<f64> = per_row.iter().map(|r| r.s_avg).collect();
    let max: Vec<f64> = per_row.iter().map(|r| r.s_max).collect();
    run.write_json(
        "sensitivity.json",
        &json!({
            "method": spec.name(),
            "mean_s_avg": crate::numeric::mean(&avg),
            "mean_s_max": crate::numeric::mean(&max),
            "radius": args.radius,
            "n_probes": args.probes,
            "norm": "L2",
            "sample_ids": rows,
            "reports": per_row,
        }),
    )?;
    run.finish()
}

fn decomposition_cmd(args: DecompositionArgs) -> CliResult<()> {
    let args = DecompositionArgs { strategy: Some(args.strategy.clone().unwrap_or_else(|| "zero".into())), ..args };
    let mut run = Run::start("verify-decomposition", &args, &args.common)?;
    let calib = load_calibrator(args.calibrator.as_ref())?;
    let mut reports = Vec::new();
    if let Some(jp) = &args.joint {
        let joint = load_joint(jp)?;
        let strategy = parse_strategy(args.strategy.as_deref().unwrap_or("zero"), None)?;
        let model = match &args.model {
            Some(p) => Classifier::load(p)?,
            None => bayes_restricted_oracle(&joint, &strategy)?,
        };
        let d = joint.n_features();
        if d > 16 {
            return Err(usage("exact decomposition enumerates 2^d coalitions; d must be at most 16"));
        }
        for mask in 0..1u64 << d {
            reports.push(exact_decomposition(&model, calib.as_ref(), &joint, &Coalition::new(mask, d)?, &strategy)?);
        }
    } else {
        let data = load_data(require(&args.data, "data or --joint")?, &args.common)?;
        let model = Classifier::load(require(&args.model, "model")?)?;
        let strategy = parse_strategy(args.strategy.as_deref().unwrap_or("zero"), Some(&data))?;
        let d = data.n_features();
        if d > 16 {
            return Err(usage("decomposition enumerates 2^d coalitions; d must be at most 16"));
        }
        let spec = ConditionalEstimatorSpec::default();
        for mask in 0..1u64 << d {
            reports.push(decomposition_report(&model, calib.as_ref(), &data, &Coalition::new(mask, d)?, &strategy, &spec, run.seed)?);
        }
    }
    let max_residual = reports.iter().map(|r| r.residual.abs()).fold(0.0, f64::max);
    let mut csv = String::from("kept_mask,level,baseline_bias,mutual_info,calib_error,predictive_power,residual\n");
    for r in &reports {
        csv.push_str(&format!(
            "{:#x},{},{},{},{},{},{}\n",
            r.coalition.mask(),
            r.coalition.level(),
            r.baseline_bias,
            r.mutual_info,
            r.calib_error,
            r.predictive_power,
            r.residual
        ));
    }
    run.write_text("decomposition.csv", &csv)?;
    run.write_json("decomposition.json", &json!({ "max_abs_residual": max_residual, "reports": reports }))?;
    run.finish()
}

fn bound_cmd(args: BoundArgs) -> CliResult<()> {
    let args = BoundArgs {
        strategy: Some(args.strategy.clone().unwrap_or_else(|| "zero".into())),
        delta: Some(args.delta.unwrap_or(0.1)),
        trials: Some(args.trials.unwrap_or(200)),
        scales: Some(args.scales.clone().unwrap_or_else(|| "1,2,4,8".into())),
        ..args
    };
    let mut run = Run::start("verify-bound", &args, &args.common)?;
    let joint = load_joint(require(&args.joint, "joint")?)?;
    let strategy = parse_strategy(args.strategy.as_deref().unwrap_or("zero"), None)?;
    let scales: Vec<f64> = parse_list(args.scales.as_deref().unwrap_or_default(), "scales")?;
    let sweep = drift_scale_sweep(&joint, &strategy, &scales, args.delta.unwrap_or(0.1), args.trials.unwrap_or(200), run.seed)?;
    run.write_json("bound.json", &sweep)?;
    run.finish()
}

fn configured<A: Serialize + DeserializeOwned>(args: A, common: &Common, command: &str) -> CliResult<A> {
    merge_config(&args, command, common.config.as_deref())
}

/// Re-attaches the run-local flags (`--out`, `--config`, `--workers`) that
/// are not part of the stored configuration, and fills in the shared
/// defaults so `run.json` is fully resolved.
fn with_local(mut common: Common, local: &Common) -> Common {
    common.seed.get_or_insert(0);
    common.label_column.get_or_insert_with(|| "label".into());
    common.n_classes.get_or_insert(2);
    common.out = local.out.clone();
    common.config = local.config.clone();
    common.workers = local.workers;
    common
}

macro_rules! resolve {
    ($args:expr, $name:literal) => {{
        let local = $args.common.clone();
        let mut a = configured($args, &local, $name)?;
        a.common = with_local(a.common, &local);
        a
    }};
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::GenData(a) => gen_data(resolve!(a, "gen-data")),
        Command::Train(a) => train(resolve!(a, "train")),
        Command::Calibrate(a) => calibrate(resolve!(a, "calibrate")),
        Command::Measure(a) => measure(resolve!(a, "measure")),
        Command::Explain(a) => explain_cmd(resolve!(a, "explain")),
        Command::EvalRoar(a) => roar_cmd(resolve!(a, "eval-roar")),
        Command::EvalSensitivity(a) => sensitivity_cmd(resolve!(a, "eval-sensitivity")),
        Command::VerifyDecomposition(a) => decomposition_cmd(resolve!(a, "verify-decomposition")),
        Command::VerifyBound(a) => bound_cmd(resolve!(a, "verify-bound")),
    }
}

fn worker_count(command: &Command) -> CliResult<usize> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        return v.parse().map_err(|_| usage(format!("{WORKERS_ENV} must be a positive integer, got `{v}`")));
    }
    let common = match command {
        Command::GenData(a) => &a.common,
        Command::Train(a) => &a.common,
        Command::Calibrate(a) => &a.common,
        Command::Measure(a) => &a.common,
        Command::Explain(a) => &a.common,
        Command::EvalRoar(a) => &a.common,
        Command::EvalSensitivity(a) => &a.common,
        Command::VerifyDecomposition(a) => &a.common,
        Command::VerifyBound(a) => &a.common,
    };
    Ok(common.workers.unwrap_or(1))
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = worker_count(&cli.command).and_then(|n| {
        if n == 0 {
            return Err(usage("worker count must be at least 1"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| runtime(e.to_string()))?;
        pool.install(|| dispatch(cli.command))
    });
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
