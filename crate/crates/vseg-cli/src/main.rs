//! Command-line front end for the segmentation engine.
//!
//! Each subcommand is a thin shell around one library entry point: it parses
//! flags, resolves file paths, runs the library, and writes the results.
//! Progress lines go to stderr; machine-readable output goes to files only.
//! Every successful run additionally leaves a JSON manifest next to its
//! primary output recording the resolved configuration, the files read, the
//! files written, and the wall-clock duration, so a pipeline of runs can be
//! audited afterwards.
//!
//! Exit codes: 0 on success, 1 for bad usage or bad input data (including a
//! failed gradient check), 2 for internal faults that indicate a bug.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use vseg::ensemble::{
    fuse, threshold_decision, EnsembleError, EnsembleInput, FusionStrategy, ThresholdDecision,
    ThresholdRule,
};
use vseg::metrics::{evaluate_subject, MetricError, SubjectReport};
use vseg::network::{NetError, SegNetwork};
use vseg::planner::{fingerprint_dataset, make_plan, DatasetFingerprint, NetworkPlan, PlanError};
use vseg::train::{
    grad_check_filtered, make_folds, tiny_plan, train_fold, Subject, TrainConfig, TrainError,
};
use vseg::volio::{
    generate_phantom, read_labelmap, read_volume, standardize_intensity, write_labelmap,
    write_volume, LabelMap, PhantomSpec, VolError, Volume,
};

// ---------------------------------------------------------------------------
// Errors and exit codes

/// Everything a subcommand can fail with, split by who is at fault.
#[derive(Debug)]
enum CliError {
    /// The invocation or its input data is invalid. Exit code 1.
    Validation(String),
    /// The tool itself misbehaved; a bug, not a usage problem. Exit code 2.
    Internal(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "{m}"),
            CliError::Internal(m) => write!(f, "{m}"),
        }
    }
}

impl From<VolError> for CliError {
    fn from(e: VolError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            // A tensor fault past the shape checks means the graph itself is
            // wrong, which no flag of the user can cause.
            NetError::Tensor(t) => CliError::Internal(format!("tensor fault: {t}")),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Tensor(t) => CliError::Internal(format!("tensor fault: {t}")),
            TrainError::Net(n) => CliError::from(n),
            other => CliError::Validation(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are successes; anything clap rejects
            // is a usage error.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Fingerprint(a) => cmd_fingerprint(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

// ---------------------------------------------------------------------------
// Argument grammar

/// Volumetric segmentation pipeline: synthesize data, fingerprint it, derive
/// a network plan, train folds, predict, score, and fuse model outputs.
#[derive(Parser)]
#[command(name = "vseg", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom subjects plus a dataset.json index.
    Phantom(PhantomArgs),
    /// Summarize a dataset into a fingerprint (shape, spacing, classes).
    Fingerprint(FingerprintArgs),
    /// Derive a network and training plan from a fingerprint.
    Plan(PlanArgs),
    /// Train one cross-validation fold and save its weights.
    Train(TrainArgs),
    /// Segment volumes with a trained network.
    Predict(PredictArgs),
    /// Score predictions against reference label maps.
    Evaluate(EvaluateArgs),
    /// Fuse predictions from several models into one label map per subject.
    Ensemble(EnsembleArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Directory receiving volumes, label maps, and dataset.json.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Number of subjects to generate.
    #[arg(long)]
    subjects: usize,
    /// Cubic grid edge length in voxels (at least 16).
    #[arg(long, default_value_t = 32)]
    grid: usize,
    /// Standard deviation of the additive Gaussian intensity noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FingerprintArgs {
    /// dataset.json index; volume paths inside are relative to it.
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    /// Where to write the fingerprint JSON.
    #[arg(long, value_name = "FILE", default_value = "fingerprint.json")]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    /// Fingerprint JSON produced by the fingerprint command.
    #[arg(long, value_name = "FILE")]
    fingerprint: PathBuf,
    /// Where to write the plan JSON.
    #[arg(long, value_name = "FILE", default_value = "plan.json")]
    out: PathBuf,
    /// Patch memory budget in voxels [default: 128^3 per input channel].
    #[arg(long, value_name = "N")]
    budget_voxels: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// dataset.json index of training subjects.
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    /// Network plan JSON.
    #[arg(long, value_name = "FILE")]
    plan: PathBuf,
    /// Directory receiving the fold weights and training log.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Which fold to train (0-based).
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Total number of cross-validation folds.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    steps_per_epoch: usize,
    /// Patches per step [default: the plan's batch size].
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    /// Initial learning rate of the polynomially decayed schedule.
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    /// Nesterov momentum coefficient, in [0, 1).
    #[arg(long, default_value_t = 0.99)]
    momentum: f64,
    /// Exponent of the polynomial learning-rate decay.
    #[arg(long, default_value_t = 0.9)]
    poly_exponent: f64,
    /// Fraction of patches forced to center on a foreground voxel.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    oversample: f64,
    /// Seed for fold shuffling, weight init, and patch sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    /// Network plan JSON the weights were trained under.
    #[arg(long, value_name = "FILE")]
    plan: PathBuf,
    /// Weight checkpoint written by the train command.
    #[arg(long, value_name = "FILE")]
    weights: PathBuf,
    /// Directory receiving one `<stem>-pred.vsg` per input volume.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Worker threads for per-volume parallelism.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Input volume files.
    #[arg(required = true, value_name = "VOLUME")]
    volumes: Vec<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// dataset.json index holding the reference label maps.
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    /// Directory of `<id>-pred.vsg` files from the predict command.
    #[arg(long, value_name = "DIR")]
    pred_dir: PathBuf,
    /// Where to write the evaluation report JSON.
    #[arg(long, value_name = "FILE", default_value = "evaluation.json")]
    out: PathBuf,
    /// Hausdorff percentile (e.g. 95 or 100).
    #[arg(long, default_value_t = 95.0)]
    percentile: f64,
    /// Worker threads for per-subject parallelism.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Fusion spec JSON; prediction paths inside are relative to it.
    #[arg(long, value_name = "FILE")]
    spec: PathBuf,
    /// Directory receiving `<id>-fused.vsg` files and decisions.json.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Worker threads for per-subject parallelism.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Network plan JSON to check [default: a built-in small plan].
    #[arg(long, value_name = "FILE")]
    plan: Option<PathBuf>,
    /// Largest acceptable relative error between analytic and numeric.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Scalar entries sampled per parameter tensor.
    #[arg(long, default_value_t = 8)]
    samples: usize,
    /// Where to write the per-parameter error report.
    #[arg(long, value_name = "FILE", default_value = "gradcheck-report.json")]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// Shared plumbing: atomic JSON files, path resolution, run manifests

/// Writes via a sibling temp file and a rename, so the destination either
/// keeps its old content or holds the complete new bytes.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let err = |e: std::io::Error| CliError::Validation(format!("cannot write {}: {e}", path.display()));
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Validation(format!("path {} has no file name", path.display())))?;
    let tmp_name = format!(".{}.tmp{}", name.to_string_lossy(), std::process::id());
    let tmp = match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(d) => d.join(&tmp_name),
        None => PathBuf::from(&tmp_name),
    };
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(err)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::Internal(format!("cannot serialize {}: {e}", path.display())))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Validation(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Validation(format!("{what} {} is invalid: {e}", path.display())))
}

fn read_volume_at(path: &Path) -> Result<Volume, CliError> {
    read_volume(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn read_labelmap_at(path: &Path) -> Result<LabelMap, CliError> {
    read_labelmap(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn write_labelmap_at(map: &LabelMap, path: &Path) -> Result<(), CliError> {
    write_labelmap(map, path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Interprets `rel` relative to `base` unless it is already absolute.
fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Directory containing `path`, defaulting to the current one.
fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn create_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", dir.display())))
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool, CliError> {
    if threads == 0 {
        return Err(CliError::Validation("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Internal(format!("cannot build thread pool: {e}")))
}

/// Record of one successful run, written next to the run's primary output
/// as `<command>-manifest.json`.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: String,
    seed: u64,
    threads: usize,
    /// Every flag after defaulting, so the run can be reproduced verbatim.
    config: serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    duration_seconds: f64,
}

#[allow(clippy::too_many_arguments)]
fn finish_run(
    manifest_path: &Path,
    command: &str,
    seed: u64,
    threads: usize,
    config: serde_json::Value,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    started: Instant,
) -> Result<(), CliError> {
    let manifest = RunManifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        threads,
        config,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        duration_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(manifest_path, &manifest)?;
    eprintln!("wrote {}", manifest_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset index

/// On-disk dataset index; file paths are relative to the index location.
#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    subjects: Vec<DatasetEntry>,
}

#[derive(Serialize, Deserialize)]
struct DatasetEntry {
    id: String,
    volume: String,
    labels: String,
}

fn load_dataset_index(path: &Path) -> Result<(DatasetIndex, PathBuf), CliError> {
    let index: DatasetIndex = read_json(path, "dataset index")?;
    if index.subjects.is_empty() {
        return Err(CliError::Validation(format!(
            "dataset index {} lists no subjects",
            path.display()
        )));
    }
    let mut seen = BTreeSet::new();
    for s in &index.subjects {
        if !seen.insert(s.id.as_str()) {
            return Err(CliError::Validation(format!(
                "dataset index {} lists subject {:?} twice",
                path.display(),
                s.id
            )));
        }
    }
    Ok((index, parent_dir(path)))
}

fn load_subject_files(base: &Path, entry: &DatasetEntry) -> Result<(Volume, LabelMap), CliError> {
    let vol = read_volume_at(&resolve(base, &entry.volume))?;
    let labels = read_labelmap_at(&resolve(base, &entry.labels))?;
    if vol.dims() != labels.dims() {
        return Err(CliError::Validation(format!(
            "subject {:?}: volume dims {:?} do not match label dims {:?}",
            entry.id,
            vol.dims(),
            labels.dims()
        )));
    }
    Ok((vol, labels))
}

// ---------------------------------------------------------------------------
// phantom

fn cmd_phantom(a: PhantomArgs) -> Result<(), CliError> {
    let started = Instant::now();
    if a.subjects == 0 {
        return Err(CliError::Validation("--subjects must be at least 1".into()));
    }
    // The jitter below keeps the outer shell inside the grid only from edge
    // length 16 upwards.
    if a.grid < 16 {
        return Err(CliError::Validation(format!(
            "--grid must be at least 16, got {}",
            a.grid
        )));
    }
    if !(a.noise >= 0.0) || !a.noise.is_finite() {
        return Err(CliError::Validation(format!(
            "--noise must be finite and nonnegative, got {}",
            a.noise
        )));
    }
    create_out_dir(&a.out_dir)?;

    let mut rng = ChaCha12Rng::seed_from_u64(a.seed);
    let g = a.grid as f64;
    let mut entries = Vec::with_capacity(a.subjects);
    let mut outputs = Vec::new();
    for i in 0..a.subjects {
        let id = format!("s{i:03}");
        let center = [0; 3].map(|_| g / 2.0 + rng.random_range(-0.06..0.06) * g);
        // Shells stay strictly nested: 0.60..0.70 of the outer radius for the
        // middle shell, 0.30..0.40 for the inner one.
        let r_wt = g * (0.30 + rng.random_range(0.0..0.06));
        let r_tc = r_wt * (0.60 + rng.random_range(0.0..0.10));
        let r_et = r_wt * (0.30 + rng.random_range(0.0..0.10));
        let spec = PhantomSpec {
            grid_size: [a.grid; 3],
            center,
            radii: [r_wt, r_tc, r_et],
            noise_sigma: a.noise,
            seed: rng.random(),
        };
        let (vol, labels) = generate_phantom(&spec)?;
        let vol_name = format!("{id}.vsg");
        let lab_name = format!("{id}-labels.vsg");
        let vol_path = a.out_dir.join(&vol_name);
        let lab_path = a.out_dir.join(&lab_name);
        write_volume(&vol, &vol_path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", vol_path.display())))?;
        write_labelmap_at(&labels, &lab_path)?;
        outputs.push(vol_path);
        outputs.push(lab_path);
        entries.push(DatasetEntry {
            id,
            volume: vol_name,
            labels: lab_name,
        });
    }
    let index_path = a.out_dir.join("dataset.json");
    write_json(&index_path, &DatasetIndex { subjects: entries })?;
    outputs.push(index_path);
    eprintln!(
        "generated {} phantom subjects on a {}^3 grid in {}",
        a.subjects,
        a.grid,
        a.out_dir.display()
    );
    finish_run(
        &a.out_dir.join("phantom-manifest.json"),
        "phantom",
        a.seed,
        1,
        json!({
            "out_dir": a.out_dir,
            "subjects": a.subjects,
            "grid": a.grid,
            "noise": a.noise,
            "seed": a.seed,
        }),
        &[],
        &outputs,
        started,
    )
}

// ---------------------------------------------------------------------------
// fingerprint

fn cmd_fingerprint(a: FingerprintArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (index, base) = load_dataset_index(&a.dataset)?;
    let mut pairs = Vec::with_capacity(index.subjects.len());
    for entry in &index.subjects {
        pairs.push(load_subject_files(&base, entry)?);
    }
    let fp = fingerprint_dataset(&pairs)?;
    write_json(&a.out, &fp)?;
    eprintln!(
        "fingerprinted {} subjects: median shape {:?}, {} channels, {} classes",
        fp.subject_count, fp.median_shape, fp.channels, fp.class_count
    );
    finish_run(
        &parent_dir(&a.out).join("fingerprint-manifest.json"),
        "fingerprint",
        0,
        1,
        json!({ "dataset": a.dataset, "out": a.out }),
        &[a.dataset.clone()],
        &[a.out.clone()],
        started,
    )
}

// ---------------------------------------------------------------------------
// plan

fn cmd_plan(a: PlanArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let fp: DatasetFingerprint = read_json(&a.fingerprint, "fingerprint")?;
    let budget = a
        .budget_voxels
        .unwrap_or_else(|| 128u64.pow(3) * fp.channels.max(1) as u64);
    let plan = make_plan(&fp, budget)?;
    write_json(&a.out, &plan)?;
    eprintln!(
        "planned {} stages, patch {:?}, batch {}, channels {}..{}",
        plan.stage_count, plan.patch_size, plan.batch_size, plan.base_channels, plan.max_channels
    );
    finish_run(
        &parent_dir(&a.out).join("plan-manifest.json"),
        "plan",
        0,
        1,
        json!({ "fingerprint": a.fingerprint, "out": a.out, "budget_voxels": budget }),
        &[a.fingerprint.clone()],
        &[a.out.clone()],
        started,
    )
}

// ---------------------------------------------------------------------------
// train

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let plan: NetworkPlan = read_json(&a.plan, "network plan")?;
    if a.fold >= a.folds {
        return Err(CliError::Validation(format!(
            "--fold {} is out of range for --folds {}",
            a.fold, a.folds
        )));
    }

    let mut cfg = TrainConfig::for_plan(&plan, a.epochs, a.steps_per_epoch, a.seed);
    cfg.fold_count = a.folds;
    cfg.learning_rate = a.learning_rate;
    cfg.momentum = a.momentum;
    cfg.poly_decay_exponent = a.poly_exponent;
    cfg.foreground_oversample = a.oversample;
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    // Fail on bad hyperparameters before the expensive loading steps.
    cfg.validate()?;

    let (index, base) = load_dataset_index(&a.dataset)?;
    let mut subjects = Vec::with_capacity(index.subjects.len());
    for entry in &index.subjects {
        let (vol, labels) = load_subject_files(&base, entry)?;
        subjects.push(Subject {
            id: entry.id.clone(),
            volume: standardize_intensity(&vol)?,
            labels,
        });
    }
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let folds = make_folds(&ids, a.folds, a.seed)?;
    let fold = &folds[a.fold];

    create_out_dir(&a.out_dir)?;
    let mut net = SegNetwork::<f32>::new(&plan, a.seed)?;
    eprintln!(
        "training fold {}/{}: {} train / {} val subjects, {} steps of batch {}",
        a.fold,
        a.folds,
        fold.train_subject_ids.len(),
        fold.val_subject_ids.len(),
        cfg.epochs * cfg.steps_per_epoch,
        cfg.batch_size
    );
    let log = train_fold(&mut net, fold, &cfg, &subjects)?;
    for (e, report) in log.epochs.iter().enumerate() {
        eprintln!(
            "epoch {}/{}: loss {:.4} (dice {:.4} + ce {:.4})",
            e + 1,
            log.epochs.len(),
            report.total,
            report.dice_component,
            report.ce_component
        );
    }

    let weights_path = a.out_dir.join(format!("fold{}.vsgw", a.fold));
    net.save_weights(&weights_path)?;
    let log_path = a.out_dir.join(format!("fold{}-log.json", a.fold));
    write_json(&log_path, &log)?;
    eprintln!("wrote {}", weights_path.display());
    finish_run(
        &a.out_dir.join("train-manifest.json"),
        "train",
        a.seed,
        1,
        json!({
            "dataset": a.dataset,
            "plan": a.plan,
            "out_dir": a.out_dir,
            "fold": a.fold,
            "folds": a.folds,
            "epochs": cfg.epochs,
            "steps_per_epoch": cfg.steps_per_epoch,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "momentum": cfg.momentum,
            "poly_exponent": cfg.poly_decay_exponent,
            "oversample": cfg.foreground_oversample,
            "deep_supervision_weights": cfg.deep_supervision_weights,
            "train_subjects": fold.train_subject_ids,
            "val_subjects": fold.val_subject_ids,
        }),
        &[a.dataset.clone(), a.plan.clone()],
        &[weights_path, log_path],
        started,
    )
}

// ---------------------------------------------------------------------------
// predict

fn cmd_predict(a: PredictArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let plan: NetworkPlan = read_json(&a.plan, "network plan")?;
    let mut net = SegNetwork::<f32>::new(&plan, 0)?;
    net.load_weights(&a.weights)?;

    let mut jobs = Vec::with_capacity(a.volumes.len());
    let mut names = BTreeSet::new();
    for input in &a.volumes {
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| {
                CliError::Validation(format!(
                    "cannot derive an output name from {}",
                    input.display()
                ))
            })?;
        let out = a.out_dir.join(format!("{stem}-pred.vsg"));
        if !names.insert(out.clone()) {
            return Err(CliError::Validation(format!(
                "two inputs map to the same output {}",
                out.display()
            )));
        }
        jobs.push((input.clone(), out));
    }
    create_out_dir(&a.out_dir)?;

    let pool = thread_pool(a.threads)?;
    let outputs: Vec<PathBuf> = pool.install(|| {
        jobs.par_iter()
            .map(|(input, out)| {
                let vol = standardize_intensity(&read_volume_at(input)?)?;
                let pred = net.predict_labels(&vol)?;
                write_labelmap_at(&pred, out)?;
                eprintln!("wrote {}", out.display());
                Ok(out.clone())
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;

    let mut inputs = vec![a.plan.clone(), a.weights.clone()];
    inputs.extend(a.volumes.iter().cloned());
    finish_run(
        &a.out_dir.join("predict-manifest.json"),
        "predict",
        0,
        a.threads,
        json!({
            "plan": a.plan,
            "weights": a.weights,
            "out_dir": a.out_dir,
            "threads": a.threads,
        }),
        &inputs,
        &outputs,
        started,
    )
}

// ---------------------------------------------------------------------------
// evaluate

/// Dataset-level evaluation report: per-subject scores plus their means.
#[derive(Serialize)]
struct EvaluationReport {
    hd_percentile: f64,
    subject_count: usize,
    mean_dice: f64,
    mean_hd: f64,
    subjects: Vec<SubjectReport>,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (index, base) = load_dataset_index(&a.dataset)?;
    let pool = thread_pool(a.threads)?;
    let reports: Vec<SubjectReport> = pool.install(|| {
        index
            .subjects
            .par_iter()
            .map(|entry| {
                let gt = read_labelmap_at(&resolve(&base, &entry.labels))?;
                let pred = read_labelmap_at(&a.pred_dir.join(format!("{}-pred.vsg", entry.id)))?;
                evaluate_subject(&entry.id, &pred, &gt, gt.spacing_f64(), a.percentile)
                    .map_err(CliError::from)
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;

    let n = reports.len() as f64;
    let report = EvaluationReport {
        hd_percentile: a.percentile,
        subject_count: reports.len(),
        mean_dice: reports.iter().map(|r| r.mean_dice).sum::<f64>() / n,
        mean_hd: reports.iter().map(|r| r.mean_hd).sum::<f64>() / n,
        subjects: reports,
    };
    write_json(&a.out, &report)?;
    eprintln!(
        "evaluated {} subjects: mean Dice {:.4}, mean HD{} {:.2}",
        report.subject_count, report.mean_dice, a.percentile, report.mean_hd
    );
    finish_run(
        &parent_dir(&a.out).join("evaluate-manifest.json"),
        "evaluate",
        0,
        a.threads,
        json!({
            "dataset": a.dataset,
            "pred_dir": a.pred_dir,
            "out": a.out,
            "percentile": a.percentile,
            "threads": a.threads,
        }),
        &[a.dataset.clone()],
        &[a.out.clone()],
        started,
    )
}

// ---------------------------------------------------------------------------
// ensemble

/// On-disk fusion spec; prediction paths are relative to the spec file.
#[derive(Deserialize)]
struct FusionSpecFile {
    strategy: FusionStrategy,
    /// Integer model weights; absent models count as weight 1.
    #[serde(default)]
    weights: BTreeMap<String, u32>,
    /// Required for (and only read by) the threshold strategy.
    #[serde(default)]
    threshold: Option<ThresholdRule>,
    subjects: Vec<FusionSubjectSpec>,
}

#[derive(Deserialize)]
struct FusionSubjectSpec {
    id: String,
    /// Model name to label-map path.
    predictions: BTreeMap<String, String>,
    /// Optional model name to probability-volume path; all or none.
    #[serde(default)]
    probabilities: BTreeMap<String, String>,
}

/// One line of decisions.json: what was fused and, for the threshold
/// strategy, why that model was chosen.
#[derive(Serialize)]
struct DecisionRecord {
    subject_id: String,
    strategy: String,
    output: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<ThresholdDecision>,
}

fn cmd_ensemble(a: EnsembleArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let spec: FusionSpecFile = read_json(&a.spec, "fusion spec")?;
    if spec.subjects.is_empty() {
        return Err(CliError::Validation(format!(
            "fusion spec {} lists no subjects",
            a.spec.display()
        )));
    }
    let mut seen = BTreeSet::new();
    for s in &spec.subjects {
        if !seen.insert(s.id.as_str()) {
            return Err(CliError::Validation(format!(
                "fusion spec {} lists subject {:?} twice",
                a.spec.display(),
                s.id
            )));
        }
    }
    if spec.strategy == FusionStrategy::Threshold && spec.threshold.is_none() {
        return Err(CliError::Validation(
            "threshold fusion needs a \"threshold\" rule in the spec".into(),
        ));
    }

    let base = parent_dir(&a.spec);
    create_out_dir(&a.out_dir)?;
    let pool = thread_pool(a.threads)?;
    let results: Vec<(PathBuf, DecisionRecord)> = pool.install(|| {
        spec.subjects
            .par_iter()
            .map(|subj| {
                let mut predictions = BTreeMap::new();
                for (model, rel) in &subj.predictions {
                    predictions.insert(model.clone(), read_labelmap_at(&resolve(&base, rel))?);
                }
                let mut probabilities = BTreeMap::new();
                for (model, rel) in &subj.probabilities {
                    probabilities.insert(model.clone(), read_volume_at(&resolve(&base, rel))?);
                }
                let input = EnsembleInput {
                    subject_id: subj.id.clone(),
                    predictions,
                    probabilities,
                    weights: spec.weights.clone(),
                };
                let decision = match (spec.strategy, spec.threshold.as_ref()) {
                    (FusionStrategy::Threshold, Some(rule)) => {
                        Some(threshold_decision(&input, rule)?)
                    }
                    _ => None,
                };
                let fused = fuse(&input, spec.strategy, spec.threshold.as_ref())?;
                let out = a.out_dir.join(format!("{}-fused.vsg", subj.id));
                write_labelmap_at(&fused, &out)?;
                eprintln!("wrote {}", out.display());
                let record = DecisionRecord {
                    subject_id: subj.id.clone(),
                    strategy: spec.strategy.to_string(),
                    output: out.display().to_string(),
                    threshold: decision,
                };
                Ok((out, record))
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;

    let mut outputs: Vec<PathBuf> = results.iter().map(|(p, _)| p.clone()).collect();
    let decisions: Vec<DecisionRecord> = results.into_iter().map(|(_, d)| d).collect();
    let decisions_path = a.out_dir.join("decisions.json");
    write_json(&decisions_path, &decisions)?;
    outputs.push(decisions_path);
    eprintln!(
        "fused {} subjects with the {} strategy",
        decisions.len(),
        spec.strategy
    );
    finish_run(
        &a.out_dir.join("ensemble-manifest.json"),
        "ensemble",
        0,
        a.threads,
        json!({
            "spec": a.spec,
            "out_dir": a.out_dir,
            "strategy": spec.strategy,
            "weights": spec.weights,
            "threshold": spec.threshold,
            "threads": a.threads,
        }),
        &[a.spec.clone()],
        &outputs,
        started,
    )
}

// ---------------------------------------------------------------------------
// gradcheck

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let started = Instant::now();
    if a.samples == 0 {
        return Err(CliError::Validation("--samples must be at least 1".into()));
    }
    let plan = match &a.plan {
        Some(p) => read_json::<NetworkPlan>(p, "network plan")?,
        None => tiny_plan(),
    };
    let report = grad_check_filtered(&plan, a.tolerance, a.samples, |_| true)?;
    write_json(&a.out, &report)?;
    eprintln!(
        "checked {} parameter tensors: max relative error {:.3e} ({})",
        report.entries.len(),
        report.max_rel_error,
        report.worst_parameter.as_deref().unwrap_or("none")
    );
    let inputs: Vec<PathBuf> = a.plan.iter().cloned().collect();
    finish_run(
        &parent_dir(&a.out).join("gradcheck-manifest.json"),
        "gradcheck",
        0,
        1,
        json!({
            "plan": a.plan,
            "tolerance": a.tolerance,
            "samples": a.samples,
            "out": a.out,
        }),
        &inputs,
        &[a.out.clone()],
        started,
    )?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "gradient check failed: max relative error {:.3e} exceeds tolerance {:.1e}",
            report.max_rel_error, a.tolerance
        )))
    }
}
