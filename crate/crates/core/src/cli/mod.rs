//! The `ctvit` command line.
//!
//! Exit codes: 0 success, 1 I/O or runtime failure, 2 usage or
//! configuration error, 3 empty input, 4 numeric failure.

mod config;

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{parse_policy_flag, CiSamples, ModelPreset, RunConfig, KEYS};

use crate::aggregation::{
    aggregate, default_grid, patient_confusion, read_predictions_csv, sweep_thresholds, write_predictions_csv,
    write_sweep_csv, AggregationError, PatientDecision, SlicePrediction, SweepRule,
};
use crate::dataset::{
    generate_synthetic, labeled_slices, manifest_csv, read_labels_csv, scan_tree, Partition, PatientScan,
    SynthPartition, SynthSpec,
};
use crate::fsutil::write_atomic;
use crate::inference::predict_scans;
use crate::label::Label;
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::training::{fit, TrainError};
use crate::vit::{load_weights, VitModel, VitParams, WeightsError};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "CTVIT_OUT_DIR";
const FALLBACK_OUT_DIR: &str = "ctvit-out";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    EmptyInput(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::EmptyInput(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::EmptyDataset => CliError::EmptyInput(e.to_string()),
            other => runtime(other),
        }
    }
}

impl From<AggregationError> for CliError {
    fn from(e: AggregationError) -> Self {
        match e {
            AggregationError::Empty | AggregationError::NoLabeledPatients => CliError::EmptyInput(e.to_string()),
            AggregationError::InvalidThreshold(_) => CliError::Usage(e.to_string()),
            other => runtime(other),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ctvit", version, about = "Slice-level ViT classification of chest CT scans with patient-level voting")]
pub struct Cli {
    /// key = value configuration file; command-line flags take precedence
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Log more detail to standard error (repeat for debug output)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic CT dataset tree
    Synth(SynthArgs),
    /// Summarize a dataset tree and optionally write its manifest CSV
    Scan(ScanArgs),
    /// Train a model on the train partition of a dataset tree
    Train(TrainArgs),
    /// Predict every slice of a dataset tree
    Predict(PredictArgs),
    /// Aggregate slice predictions per patient and compute metrics
    Evaluate(EvaluateArgs),
    /// Evaluate threshold voting over a grid of thresholds
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Root directory of the generated tree
    #[arg(long)]
    pub out: PathBuf,
    /// COVID and NonCOVID patients in the train partition
    #[arg(long, num_args = 2, value_names = ["COVID", "NONCOVID"], default_values_t = [4, 4])]
    pub train: Vec<usize>,
    /// COVID and NonCOVID patients in the validation partition
    #[arg(long, num_args = 2, value_names = ["COVID", "NONCOVID"], default_values_t = [2, 2])]
    pub validation: Vec<usize>,
    /// COVID and NonCOVID patients in the test partition
    #[arg(long, num_args = 2, value_names = ["COVID", "NONCOVID"], default_values_t = [2, 2])]
    pub test: Vec<usize>,
    /// Slices per patient
    #[arg(long, default_value_t = 12)]
    pub slices: usize,
    /// Side length of each slice in pixels
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Random seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace the generated partitions if the directory is not empty
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Dataset root
    #[arg(long)]
    pub data: PathBuf,
    /// Write the manifest CSV here
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root; its train partition is used for training and its
    /// validation partition, when present, for checkpoint selection
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for the training log and checkpoints
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Architecture preset
    #[arg(long, value_enum)]
    pub model: Option<ModelPreset>,
    /// Start from these weights instead of a fresh initialization
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Number of epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Slices per batch
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed for initialization and shuffling
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train only the classification head
    #[arg(long)]
    pub freeze_backbone: bool,
    /// Stop after this many optimizer steps
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Worker threads (defaults to all cores)
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PartitionArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Weight container to load
    #[arg(long)]
    pub weights: PathBuf,
    /// Dataset root
    #[arg(long)]
    pub data: PathBuf,
    /// Partition to predict
    #[arg(long, value_enum, default_value_t = PartitionArg::All)]
    pub partition: PartitionArg,
    /// Output prediction CSV (defaults to predictions.csv in the output directory)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (defaults to all cores)
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PolicyArgs {
    /// Voting rule: majority, fraction:T or ratio:T
    #[arg(long)]
    pub policy: Option<String>,
    /// Patient label when the vote is an exact tie
    #[arg(long)]
    pub tie_break: Option<Label>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction CSV
    #[arg(long)]
    pub predictions: PathBuf,
    /// Ground truth: a CSV with patient_id and label columns, or a dataset root
    #[arg(long)]
    pub labels: PathBuf,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Standard-normal quantile for the confidence interval
    #[arg(long)]
    pub z: Option<f64>,
    /// Sample count used for the confidence interval
    #[arg(long, value_enum)]
    pub ci_n: Option<CiSamples>,
    /// Output directory for metrics.json, confusion.csv and patients.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Prediction CSV
    #[arg(long)]
    pub predictions: PathBuf,
    /// Ground truth: a CSV with patient_id and label columns, or a dataset root
    #[arg(long)]
    pub labels: PathBuf,
    /// Comma-separated thresholds (default 0.05, 0.10, ..., 0.95)
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Threshold rule
    #[arg(long, value_enum, default_value_t = RuleArg::Fraction)]
    pub rule: RuleArg,
    /// Patient label when the vote is an exact tie
    #[arg(long)]
    pub tie_break: Option<Label>,
    /// Output directory for sweep.csv and best_threshold.json
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RuleArg {
    /// COVID share of all slices above the threshold
    Fraction,
    /// COVID count above threshold times the NonCOVID count
    Ratio,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::Scan(a) => cmd_scan(a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Predict(a) => cmd_predict(&cfg, a),
        Command::Evaluate(a) => cmd_evaluate(cfg, a),
        Command::Sweep(a) => cmd_sweep(&cfg, a),
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_atomic(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("reports serialize");
    bytes.push(b'\n');
    bytes
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, CliError> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(runtime)?;
            Ok(pool.install(f))
        }
    }
}

fn scan(root: &Path) -> Result<Vec<PatientScan>, CliError> {
    require_dir(root, "dataset root")?;
    scan_tree(root)
        .map(|r| r.patients)
        .map_err(|e| match e {
            crate::dataset::DatasetError::UnknownFolder { .. } => CliError::Usage(e.to_string()),
            other => runtime(other),
        })
}

fn cmd_synth(cfg: &RunConfig, a: SynthArgs) -> Result<(), CliError> {
    let part = |partition, v: &[usize]| SynthPartition {
        partition,
        covid: v[0],
        noncovid: v[1],
    };
    let spec = SynthSpec {
        partitions: vec![
            part(Partition::Train, &a.train),
            part(Partition::Validation, &a.validation),
            part(Partition::Test, &a.test),
        ],
        slices_per_patient: a.slices,
        image_size: a.size,
        seed: a.seed.unwrap_or(cfg.train.seed),
    };
    let report = generate_synthetic(&a.out, &spec, a.force).map_err(|e| match e {
        crate::dataset::DatasetError::Spec(_) | crate::dataset::DatasetError::NotEmpty(_) => {
            CliError::Usage(e.to_string())
        }
        other => runtime(other),
    })?;
    let slices: usize = report.patients.iter().map(PatientScan::num_slices).sum();
    println!(
        "wrote {} patients ({} slices) under {}",
        report.patients.len(),
        slices,
        a.out.display()
    );
    Ok(())
}

fn cmd_scan(a: ScanArgs) -> Result<(), CliError> {
    require_dir(&a.data, "dataset root")?;
    let report = scan_tree(&a.data).map_err(|e| match e {
        crate::dataset::DatasetError::UnknownFolder { .. } => CliError::Usage(e.to_string()),
        other => runtime(other),
    })?;
    println!("partition,covid_patients,noncovid_patients,unknown_patients,total_slices,skipped_patients");
    for s in &report.summaries {
        println!(
            "{},{},{},{},{},{}",
            s.partition, s.covid_patients, s.noncovid_patients, s.unknown_patients, s.total_slices, s.skipped_patients
        );
    }
    if let Some(path) = &a.manifest {
        write_file(path, &manifest_csv(&report.patients).map_err(runtime)?)?;
    }
    if report.patients.is_empty() {
        return Err(CliError::EmptyInput(format!("{}: no patients found", a.data.display())));
    }
    Ok(())
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> Result<(), CliError> {
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.max_steps {
        t.max_steps = Some(v);
    }
    t.freeze_backbone |= a.freeze_backbone;
    t.validate()?;
    if let Some(p) = a.model {
        cfg.model = p.config();
    }
    let mut model = match &a.init {
        Some(path) => {
            let (config, params) = load_weights(path).map_err(weights_error)?;
            VitModel::new(config, params)
        }
        None => {
            let params = VitParams::init(&cfg.model, cfg.train.seed).map_err(|e| CliError::Usage(e.to_string()))?;
            VitModel::new(cfg.model, params)
        }
    };
    let preprocess = cfg.preprocess_for(model.config.image_size)?;
    let patients = scan(&a.data)?;
    let pick = |p: Partition| labeled_slices(&patients.iter().filter(|s| s.partition == p).cloned().collect::<Vec<_>>());
    let train = pick(Partition::Train);
    let validation = pick(Partition::Validation);
    if train.is_empty() {
        return Err(CliError::EmptyInput(format!("{}: no labeled training slices", a.data.display())));
    }
    let dir = out_dir(a.out, &cfg);
    let train_cfg = cfg.train;
    let report = with_threads(a.threads, || {
        fit(
            &mut model,
            &train,
            (!validation.is_empty()).then_some(validation.as_slice()),
            &preprocess,
            &train_cfg,
            Some(&dir),
        )
    })??;
    if report.skipped_slices > 0 {
        eprintln!("skipped {} unreadable slices", report.skipped_slices);
    }
    let last = report.records.last().expect("at least one epoch");
    println!(
        "trained {} steps; last epoch accuracy {:.4}; best epoch {} written to {}",
        report.steps,
        last.accuracy,
        report.best_epoch,
        dir.join(crate::training::BEST_CHECKPOINT).display()
    );
    Ok(())
}

fn weights_error(e: WeightsError) -> CliError {
    match e {
        WeightsError::Io { .. } => CliError::Usage(format!("cannot load weights: {e}")),
        other => CliError::Usage(format!("invalid weights: {other}")),
    }
}

fn cmd_predict(cfg: &RunConfig, a: PredictArgs) -> Result<(), CliError> {
    if !a.weights.is_file() {
        return Err(CliError::Usage(format!("weights file {} not found", a.weights.display())));
    }
    require_dir(&a.data, "dataset root")?;
    let (config, params) = load_weights(&a.weights).map_err(weights_error)?;
    let model = VitModel::new(config, params);
    let preprocess = cfg.preprocess_for(config.image_size)?;
    let patients: Vec<PatientScan> = scan(&a.data)?
        .into_iter()
        .filter(|p| match a.partition {
            PartitionArg::All => true,
            PartitionArg::Train => p.partition == Partition::Train,
            PartitionArg::Validation => p.partition == Partition::Validation,
            PartitionArg::Test => p.partition == Partition::Test,
        })
        .collect();
    if patients.iter().all(|p| p.slice_paths.is_empty()) {
        return Err(CliError::EmptyInput(format!("{}: no slices to predict", a.data.display())));
    }
    let run = with_threads(a.threads, || predict_scans(&model, &patients, &preprocess))?.map_err(runtime)?;
    if run.predictions.iter().any(|p| !p.p_covid.is_finite()) {
        return Err(CliError::Numeric("non-finite probability in predictions".into()));
    }
    let out = a.out.unwrap_or_else(|| out_dir(None, cfg).join("predictions.csv"));
    write_file(&out, &write_predictions_csv(&run.predictions))?;
    eprintln!(
        "predicted {} slices, skipped {} unreadable slices",
        run.predictions.len(),
        run.skipped.len()
    );
    if run.predictions.is_empty() {
        return Err(CliError::EmptyInput("no slice could be read".into()));
    }
    Ok(())
}

fn load_predictions(path: &Path) -> Result<Vec<SlicePrediction>, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(CliError::EmptyInput(format!("{}: empty prediction file", path.display())));
    }
    let preds = read_predictions_csv(&bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    if preds.is_empty() {
        return Err(CliError::EmptyInput(format!("{}: no predictions", path.display())));
    }
    Ok(preds)
}

/// Ground-truth labels from a CSV file or from the class folders of a dataset tree.
pub fn load_labels(source: &Path) -> Result<HashMap<String, Label>, CliError> {
    if source.is_dir() {
        Ok(scan(source)?
            .into_iter()
            .filter_map(|p| p.label.map(|l| (p.patient_id, l)))
            .collect())
    } else if source.is_file() {
        read_labels_csv(source).map_err(runtime)
    } else {
        Err(CliError::Usage(format!("label source {} not found", source.display())))
    }
}

fn confusion_csv(cm: &ConfusionMatrix) -> Vec<u8> {
    format!(
        "predicted,actual_COVID,actual_NonCOVID\nCOVID,{},{}\nNonCOVID,{},{}\n",
        cm.tp, cm.fp, cm.fn_, cm.tn
    )
    .into_bytes()
}

fn decisions_csv(decisions: &[PatientDecision]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["patient_id", "covid_slices", "noncovid_slices", "label"]).expect("in-memory write");
    for d in decisions {
        w.write_record([
            d.patient_id.clone(),
            d.covid_slices.to_string(),
            d.noncovid_slices.to_string(),
            d.label.to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

#[derive(Debug, Serialize)]
struct EvaluationOutput<'a> {
    policy: &'a crate::aggregation::ThresholdPolicy,
    patients: usize,
    slices: usize,
    excluded_patients: &'a [String],
    #[serde(flatten)]
    metrics: &'a MetricsReport,
}

fn cmd_evaluate(mut cfg: RunConfig, a: EvaluateArgs) -> Result<(), CliError> {
    if let Some(p) = &a.policy.policy {
        cfg.policy.kind = parse_policy_flag(p)?;
    }
    if let Some(t) = a.policy.tie_break {
        cfg.policy.tie_break = t;
    }
    if let Some(z) = a.z {
        cfg.z = z;
    }
    if let Some(c) = a.ci_n {
        cfg.ci_samples = c;
    }
    cfg.policy.validate()?;
    let preds = load_predictions(&a.predictions)?;
    let labels = load_labels(&a.labels)?;
    let decisions = aggregate(&preds, &cfg.policy)?;
    let (cm, excluded) = patient_confusion(&decisions, &labels);
    for id in &excluded {
        log::warn!("patient {id} has no label and is excluded");
    }
    if cm.total() == 0 {
        return Err(CliError::EmptyInput("no predicted patient has a label".into()));
    }
    let slices = preds.iter().filter(|p| labels.contains_key(&p.patient_id)).count();
    let n = match cfg.ci_samples {
        CiSamples::Patients => cm.total(),
        CiSamples::Slices => slices as u64,
    };
    let report = MetricsReport::compute(&cm, Some(n), cfg.z).map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = out_dir(a.out, &cfg);
    let output = EvaluationOutput {
        policy: &cfg.policy,
        patients: cm.total() as usize,
        slices,
        excluded_patients: &excluded,
        metrics: &report,
    };
    write_file(&dir.join("patients.csv"), &decisions_csv(&decisions))?;
    write_file(&dir.join("confusion.csv"), &confusion_csv(&cm))?;
    write_file(&dir.join("metrics.json"), &to_json(&output))?;
    println!(
        "patients {} accuracy {:.4} macro F1 (class-wise) {:.4} weighted F1 {:.4}",
        cm.total(),
        report.accuracy,
        report.macro_f1_classwise,
        report.weighted_f1
    );
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, a: SweepArgs) -> Result<(), CliError> {
    let grid = a.grid.unwrap_or_else(default_grid);
    let rule = match a.rule {
        RuleArg::Fraction => SweepRule::Fraction,
        RuleArg::Ratio => SweepRule::Ratio,
    };
    let preds = load_predictions(&a.predictions)?;
    let labels = load_labels(&a.labels)?;
    let sweep = sweep_thresholds(&preds, &labels, &grid, rule, a.tie_break.unwrap_or(cfg.policy.tie_break))?;
    let dir = out_dir(a.out, cfg);
    write_file(&dir.join("sweep.csv"), &write_sweep_csv(&sweep.rows))?;
    write_file(&dir.join("best_threshold.json"), &to_json(&sweep.summary))?;
    println!(
        "best accuracy {:.4} at {}; best weighted F1 {:.4} at {}",
        sweep.summary.best_accuracy.value,
        sweep.summary.best_accuracy.threshold,
        sweep.summary.best_weighted_f1.value,
        sweep.summary.best_weighted_f1.threshold
    );
    Ok(())
}
