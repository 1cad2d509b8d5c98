//! Command-line entry points.
//!
//! One binary, seven subcommands: `prepare`, `train`, `pipeline`,
//! `pseudolabel`, `evaluate`, `ensemble`, and `fid`. Every command reads an
//! optional TOML run configuration (`--config`), applies flag overrides,
//! writes a `resolved_config.toml` snapshot into its output directory, and
//! exits 0 on success. Failures map to stable exit codes: 2 for
//! configuration problems, 3 for data problems, 4 for runtime or numerical
//! failures — with a message naming the offending field, file, or sample.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{ConfigError, RunConfig};
use crate::dataset::{
    load_drive_dataset, load_synthetic_images, DatasetError, DatasetManifest, Split,
};
use crate::imgproc::{save_mask, save_rgb8, ImageIoError};
use crate::metrics::{
    evaluate_model, feature_stats, fid, raw_features, report_csv_string, write_report_csv,
    write_report_json, FidReport, MetricsError, MetricsReport, RAW_EXTRACTOR_NAME,
};
use crate::model::{ModelError, SAUNet};
use crate::pipeline::{
    holdout_split, pseudo_label, Ensemble, EnsembleMode, EnsembleSpec, PipelineError,
    PipelineRunner, Stage, VALIDATION_FRACTION,
};
use crate::seed::derive_seed;
use crate::training::{train, TrainError};

/// Default binarization threshold for evaluation commands.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Classified command failure; the variant fixes the exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit 2: configuration problems (bad flags, bad config file, missing
    /// roots, invalid parameter combinations).
    Config(String),
    /// Exit 3: data problems (unreadable datasets, malformed checkpoints,
    /// unlabeled samples).
    Data(String),
    /// Exit 4: runtime or numerical failures.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ImageIoError> for CliError {
    fn from(e: ImageIoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config { .. } => CliError::Config(e.to_string()),
            ModelError::Io { .. }
            | ModelError::CheckpointFormat { .. }
            | ModelError::CheckpointMismatch { .. } => CliError::Data(e.to_string()),
            ModelError::Shape { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { .. } => CliError::Config(e.to_string()),
            TrainError::Unlabeled { .. } => CliError::Data(e.to_string()),
            TrainError::Data(inner) => inner.into(),
            TrainError::Model(inner) => inner.into(),
            TrainError::Metrics(inner) => inner.into(),
            TrainError::ShapeMismatch { .. }
            | TrainError::NonBinaryTarget { .. }
            | TrainError::Io { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Data { .. } => CliError::Data(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config { .. } | PipelineError::StaleState { .. } => {
                CliError::Config(e.to_string())
            }
            PipelineError::AlreadyLabeled { .. } | PipelineError::StateFormat { .. } => {
                CliError::Data(e.to_string())
            }
            PipelineError::Data(inner) => inner.into(),
            PipelineError::Model(inner) => inner.into(),
            PipelineError::Train(inner) => inner.into(),
            PipelineError::Metrics(inner) => inner.into(),
            PipelineError::Image(inner) => inner.into(),
            PipelineError::MemberShape { .. }
            | PipelineError::Predict { .. }
            | PipelineError::Io { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "retseg",
    version,
    about = "Retinal vessel segmentation: attention U-Net training, synthetic-data pipeline, ensembling, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resize a DRIVE-format dataset and write manifests for later commands.
    Prepare(PrepareArgs),
    /// Train the network on the real training split and evaluate on test.
    Train(TrainArgs),
    /// Run the full synthetic-data pipeline (resumes if interrupted).
    Pipeline(PipelineArgs),
    /// Label a directory of unlabeled images with a trained checkpoint.
    Pseudolabel(PseudolabelArgs),
    /// Evaluate a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Evaluate an ensemble of checkpoints on a dataset split.
    Ensemble(EnsembleArgs),
    /// Fréchet distance between the feature statistics of two image sets.
    Fid(FidArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (TOML). Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed (overrides the config's `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// DRIVE-format dataset root (overrides the config's `data_root`).
    #[arg(long)]
    drive_root: Option<PathBuf>,
    /// Target resolution (overrides the config's `target_size`).
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Print the test report as JSON on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Print the final test report as JSON on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PseudolabelArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained checkpoint that produces the labels.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of unlabeled PNG images.
    #[arg(long)]
    synth_dir: PathBuf,
    /// Binarization threshold (overrides the config's
    /// `pipeline.pseudo_label_threshold`).
    #[arg(long)]
    threshold: Option<f64>,
    /// Print a JSON summary on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset split to evaluate on.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    data: SplitArg,
    /// Binarization threshold.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Print the report as JSON on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EnsembleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Member checkpoints (comma-separated). Falls back to the config's
    /// `ensemble.members`.
    #[arg(long, value_delimiter = ',')]
    members: Vec<PathBuf>,
    /// Fusion rule.
    #[arg(long, value_enum, default_value_t = ModeArg::Mean)]
    mode: ModeArg,
    /// Dataset split to evaluate on.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    data: SplitArg,
    /// Binarization threshold.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Print the report as JSON on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct FidArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory of reference (real) PNG images.
    #[arg(long)]
    real: PathBuf,
    /// Directory of comparison (synthetic) PNG images.
    #[arg(long)]
    synth: PathBuf,
    /// Print the result as JSON on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Mean,
    Max,
    Min,
    Vote,
}

impl From<ModeArg> for EnsembleMode {
    fn from(m: ModeArg) -> EnsembleMode {
        match m {
            ModeArg::Mean => EnsembleMode::Mean,
            ModeArg::Max => EnsembleMode::Max,
            ModeArg::Min => EnsembleMode::Min,
            ModeArg::Vote => EnsembleMode::Vote,
        }
    }
}

/// Parse the process arguments, run, and return the exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Pipeline(args) => cmd_pipeline(args),
        Command::Pseudolabel(args) => cmd_pseudolabel(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ensemble(args) => cmd_ensemble(args),
        Command::Fid(args) => cmd_fid(args),
    }
}

/// Load the configuration (or defaults) and apply the common overrides.
fn resolve(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

/// Write the fully resolved configuration into the output directory so the
/// run can be replayed from its artifacts.
fn snapshot(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| {
        CliError::Runtime(format!(
            "could not create output directory {}: {e}",
            cfg.out_dir.display()
        ))
    })?;
    cfg.save(&cfg.out_dir.join("resolved_config.toml"))?;
    Ok(())
}

fn print_report(name: &str, report: &MetricsReport, json: bool) {
    if json {
        println!("{}", crate::metrics::report_json_string(report).trim_end());
    } else {
        print!("{}", report_csv_string(&[(name.to_string(), report.clone())]));
    }
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<DatasetManifest, CliError> {
    cfg.validate_data_root()?;
    Ok(load_drive_dataset(&cfg.data_root, split)?.with_target_size(cfg.target_size)?)
}

fn cmd_prepare(args: PrepareArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&args.common)?;
    if let Some(root) = &args.drive_root {
        cfg.data_root = root.clone();
    }
    if let Some(size) = args.size {
        cfg.target_size = size;
    }
    cfg.validate()?;
    cfg.validate_data_root()?;
    snapshot(&cfg)?;

    let mut counts = Vec::new();
    for split in [Split::Train, Split::Test] {
        let manifest = load_drive_dataset(&cfg.data_root, split)?
            .with_target_size(cfg.target_size)?;
        let split_name = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let split_dir = cfg.out_dir.join(split_name);
        let images_dir = split_dir.join("images");
        let vessel_dir = split_dir.join("vessel");
        let fov_dir = split_dir.join("fov");
        for d in [&images_dir, &vessel_dir, &fov_dir] {
            std::fs::create_dir_all(d).map_err(|e| {
                CliError::Runtime(format!("could not create {}: {e}", d.display()))
            })?;
        }
        let mut out = manifest.clone();
        for (i, sample_ref) in manifest.samples.iter().enumerate() {
            let sample = manifest.load_preprocessed(i)?;
            let image_path = images_dir.join(format!("{}.png", sample.id));
            save_rgb8(&image_path, &sample.image)?;
            let vessel_path = match &sample.vessel_mask {
                Some(mask) => {
                    let p = vessel_dir.join(format!("{}.png", sample.id));
                    save_mask(&p, mask)?;
                    Some(p)
                }
                None => None,
            };
            let fov_path = fov_dir.join(format!("{}.png", sample.id));
            save_mask(&fov_path, &sample.fov_mask)?;
            out.samples[i] = crate::dataset::SampleRef {
                id: sample_ref.id.clone(),
                image_path,
                vessel_path,
                fov_path: Some(fov_path),
                source: sample_ref.source,
            };
        }
        out.save(&split_dir.join("manifest.json"))?;
        counts.push((split_name, out.len()));
    }
    println!(
        "prepared {} train + {} test samples at {}x{} into {}",
        counts[0].1,
        counts[1].1,
        cfg.target_size,
        cfg.target_size,
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve(&args.common)?;
    cfg.validate()?;
    snapshot(&cfg)?;
    let train_all = load_split(&cfg, Split::Train)?;
    let test = load_split(&cfg, Split::Test)?;
    let (train_m, val_m) = holdout_split(&train_all, VALIDATION_FRACTION)?;

    let mut net = SAUNet::new(cfg.model.clone(), derive_seed(cfg.seed, "train-init", &[]))?;
    let train_cfg = cfg.effective_train_cfg();
    let record = train(&mut net, &train_m, &train_cfg, &val_m, &cfg.out_dir)?;
    record.write_csv(&cfg.out_dir.join("history.csv"))?;
    let best = record
        .best_checkpoint
        .expect("a run with epochs always records a best checkpoint");

    let (best_net, _) = SAUNet::load_checkpoint(&best)?;
    let report = evaluate_model(&best_net, &test, DEFAULT_THRESHOLD)?;
    write_report_json(&cfg.out_dir.join("report.json"), &report)?;
    write_report_csv(
        &cfg.out_dir.join("report.csv"),
        &[("train".to_string(), report.clone())],
    )?;
    print_report("train", &report, args.json);
    Ok(())
}

fn cmd_pipeline(args: PipelineArgs) -> Result<(), CliError> {
    let cfg = resolve(&args.common)?;
    cfg.validate()?;
    snapshot(&cfg)?;
    let train_all = load_split(&cfg, Split::Train)?;
    let test = load_split(&cfg, Split::Test)?;
    let (train_m, val_m) = holdout_split(&train_all, VALIDATION_FRACTION)?;

    let mut runner = PipelineRunner::new(
        &cfg.out_dir,
        cfg.pipeline.clone(),
        cfg.effective_train_cfg(),
        cfg.model.clone(),
        &train_m,
        &val_m,
        &test,
    )?;
    let state = runner.run()?;
    debug_assert_eq!(state.stage, Stage::Done);

    let final_report_path = state
        .reports
        .last()
        .expect("a completed pipeline writes at least one report");
    let text = std::fs::read_to_string(final_report_path).map_err(|e| {
        CliError::Runtime(format!(
            "could not read final report {}: {e}",
            final_report_path.display()
        ))
    })?;
    if args.json {
        print!("{text}");
    } else {
        let report: MetricsReport = serde_json::from_str(&text).map_err(|e| {
            CliError::Runtime(format!("could not parse final report: {e}"))
        })?;
        println!(
            "pipeline done: {} iterations, {} checkpoints, final report {}",
            state.iteration,
            state.checkpoints.len(),
            final_report_path.display()
        );
        print_report("pipeline", &report, false);
    }
    Ok(())
}

fn cmd_pseudolabel(args: PseudolabelArgs) -> Result<(), CliError> {
    let cfg = resolve(&args.common)?;
    let threshold = args
        .threshold
        .unwrap_or(cfg.pipeline.pseudo_label_threshold);
    snapshot(&cfg)?;
    let synth = load_synthetic_images(&args.synth_dir)?.with_target_size(cfg.target_size)?;
    let (net, _) = SAUNet::load_checkpoint(&args.checkpoint)?;
    let out = cfg.out_dir.join("pseudo_labels");
    let labeled = pseudo_label(&net, &synth, threshold, &out)?;
    let manifest_path = out.join("manifest.json");
    labeled.save(&manifest_path)?;
    if args.json {
        println!(
            "{}",
            serde_json::json!({
                "labeled": labeled.len(),
                "threshold": threshold,
                "manifest": manifest_path,
            })
        );
    } else {
        println!(
            "labeled {} images at threshold {} -> {}",
            labeled.len(),
            threshold,
            manifest_path.display()
        );
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let cfg = resolve(&args.common)?;
    snapshot(&cfg)?;
    let manifest = load_split(&cfg, args.data.into())?;
    let (net, _) = SAUNet::load_checkpoint(&args.checkpoint)?;
    let report = evaluate_model(&net, &manifest, args.threshold)?;
    write_report_json(&cfg.out_dir.join("report.json"), &report)?;
    print_report("evaluate", &report, args.json);
    Ok(())
}

fn cmd_ensemble(args: EnsembleArgs) -> Result<(), CliError> {
    let cfg = resolve(&args.common)?;
    snapshot(&cfg)?;
    let spec = if args.members.is_empty() {
        cfg.ensemble.clone().ok_or_else(|| {
            CliError::Config(
                "no ensemble members: pass --members or set [ensemble] in the config".into(),
            )
        })?
    } else {
        EnsembleSpec {
            members: args.members.clone(),
            mode: args.mode.into(),
            threshold: args.threshold,
        }
    };
    let ensemble = Ensemble::load(&spec)?;
    let manifest = load_split(&cfg, args.data.into())?;
    let report = evaluate_model(&ensemble, &manifest, spec.threshold)?;
    write_report_json(&cfg.out_dir.join("report.json"), &report)?;
    print_report("ensemble", &report, args.json);
    Ok(())
}

fn load_images_dir(dir: &Path) -> Result<Vec<ndarray::Array3<f64>>, CliError> {
    let manifest = load_synthetic_images(dir)?;
    let mut images = Vec::with_capacity(manifest.len());
    for i in 0..manifest.len() {
        images.push(manifest.load_sample(i)?.image);
    }
    Ok(images)
}

fn cmd_fid(args: FidArgs) -> Result<(), CliError> {
    let cfg = resolve(&args.common)?;
    snapshot(&cfg)?;
    let real = load_images_dir(&args.real)?;
    let synth = load_images_dir(&args.synth)?;
    let stats_real = feature_stats(&real, &raw_features)?;
    let stats_synth = feature_stats(&synth, &raw_features)?;
    let value = fid(&stats_real, &stats_synth)?;
    let report = FidReport::new(value, RAW_EXTRACTOR_NAME, &stats_real, &stats_synth);
    let json = serde_json::to_string_pretty(&report).expect("fid report serializes") + "\n";
    std::fs::write(cfg.out_dir.join("fid.json"), &json).map_err(|e| {
        CliError::Runtime(format!("could not write fid report: {e}"))
    })?;
    if args.json {
        print!("{json}");
    } else {
        println!(
            "fid {} (extractor {}, {} vs {} images)",
            report.value, report.extractor, report.n_a, report.n_b
        );
    }
    Ok(())
}
