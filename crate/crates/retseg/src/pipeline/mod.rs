//! Synthetic-data pipeline: pseudo-labeling, staged retraining, ensembling.
//!
//! The pipeline turns a pool of unlabeled synthetic images into extra
//! training data. Each run walks a fixed stage sequence — train a base
//! model on the real data, acquire synthetic images, pseudo-label them
//! with the best model so far, retrain from scratch on the first half of
//! the configured data ordering, fine-tune on the second half — and can
//! repeat the acquisition/labeling/retraining loop for several iterations,
//! always labeling with the newest model. State is persisted after every
//! stage (write-temp-then-rename), so a killed run resumes at the stage it
//! reached instead of starting over.

mod ensemble;
mod toygen;

pub use ensemble::{Ensemble, EnsembleMode, EnsembleSpec};
pub use toygen::toy_generate;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    load_drive_dataset, load_synthetic_images, DatasetError, DatasetManifest, Split,
};
use crate::imgproc::{save_gray16, save_mask, ImageIoError};
use crate::metrics::{evaluate_model, write_report_json, MetricsError, Predictor};
use crate::model::{ModelError, SAUNet, SAUNetConfig};
use crate::seed::{content_hash, derive_seed};
use crate::training::{fine_tune, train, TrainConfig, TrainError};

/// Fraction of the training set held out for validation when a run is
/// assembled from a data root.
pub const VALIDATION_FRACTION: f64 = 0.1;
/// Threshold used for the per-stage test reports.
pub const REPORT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {message}")]
    Config { message: String },
    #[error("sample {id} already has a vessel annotation; refusing to overwrite ground truth")]
    AlreadyLabeled { id: String },
    #[error("ensemble member outputs disagree on shape: {detail}")]
    MemberShape { detail: String },
    #[error("prediction failed: {detail}")]
    Predict { detail: String },
    #[error("pipeline state at {path} does not match this run: {detail}")]
    StaleState { path: PathBuf, detail: String },
    #[error("could not parse pipeline state {path}: {detail}")]
    StateFormat { path: PathBuf, detail: String },
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("pipeline i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Where synthetic images come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorSource {
    /// Built-in procedural generator (no external assets needed).
    ToyProcedural,
    /// Directory of pre-generated images (e.g. a GAN's output), laid out as
    /// `<dir>/*.png` with optional `fov/` masks.
    ExternalDir(PathBuf),
}

/// Order in which the two data pools feed the retrain/fine-tune stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixOrder {
    /// Retrain on real data, fine-tune on pseudo-labeled synthetic data.
    RealThenSynth,
    /// Retrain on pseudo-labeled synthetic data, fine-tune on real data.
    SynthThenReal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub generator_source: GeneratorSource,
    pub synthetic_count: usize,
    pub order: MixOrder,
    pub augment_real: bool,
    pub augment_synth: bool,
    pub iterations: usize,
    pub pseudo_label_threshold: f64,
    /// Retrain stages start from fresh parameters by default; set to warm
    /// start from the latest checkpoint instead.
    pub warm_start: bool,
    /// Free-form provenance copied into the synthetic manifest (e.g. the
    /// external generator's truncation setting).
    pub generator_metadata: BTreeMap<String, String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            generator_source: GeneratorSource::ToyProcedural,
            synthetic_count: 50,
            order: MixOrder::RealThenSynth,
            augment_real: true,
            augment_synth: false,
            iterations: 1,
            pseudo_label_threshold: 0.5,
            warm_start: false,
            generator_metadata: BTreeMap::new(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |message: String| Err(PipelineError::Config { message });
        if self.synthetic_count == 0 {
            return bad("synthetic_count must be at least 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.pseudo_label_threshold > 0.0 && self.pseudo_label_threshold < 1.0) {
            return bad(format!(
                "pseudo_label_threshold must lie strictly inside (0, 1), got {}",
                self.pseudo_label_threshold
            ));
        }
        Ok(())
    }
}

/// Stage about to execute. `Done` is terminal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    BaseTrain,
    Generate,
    PseudoLabel,
    Retrain,
    Finetune,
    Done,
}

/// Persisted progress of one pipeline run. `stage` names the next stage to
/// execute; every path listed exists on disk once its stage completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    /// Fingerprint of the configuration this run was started with; resuming
    /// under a different configuration is refused.
    pub config_hash: u64,
    /// 1-based iteration of the generate/label/retrain/fine-tune loop.
    pub iteration: usize,
    pub stage: Stage,
    pub real_train: PathBuf,
    pub real_val: PathBuf,
    pub test: PathBuf,
    pub synthetic: Option<PathBuf>,
    pub labeled_synthetic: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub reports: Vec<PathBuf>,
}

/// Label unlabeled samples with a model's thresholded predictions.
///
/// Every sample gains a binary mask (`prediction >= threshold`, written as
/// a PNG under `out_dir`) plus a 16-bit soft probability map alongside it;
/// sources stay synthetic. Samples that already carry a vessel annotation
/// are refused — ground truth is never overwritten.
pub fn pseudo_label(
    net: &dyn Predictor,
    synth: &DatasetManifest,
    threshold: f64,
    out_dir: &Path,
) -> Result<DatasetManifest, PipelineError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(PipelineError::Config {
            message: format!("pseudo-label threshold must lie strictly inside (0, 1), got {threshold}"),
        });
    }
    if synth.is_empty() {
        return Err(PipelineError::Config {
            message: "pseudo-labeling needs a nonempty manifest".into(),
        });
    }
    for s in &synth.samples {
        if s.vessel_path.is_some() {
            return Err(PipelineError::AlreadyLabeled { id: s.id.clone() });
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|source| PipelineError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    // Per-image inference in parallel, collected in manifest order.
    let maps: Vec<Result<ndarray::Array2<f64>, PipelineError>> =
        crate::workers::pool().install(|| {
            (0..synth.len())
                .into_par_iter()
                .map(|idx| {
                    let sample = synth.load_preprocessed(idx)?;
                    net.predict(&sample.image).map_err(|e| PipelineError::Predict {
                        detail: format!("sample {}: {e}", sample.id),
                    })
                })
                .collect()
        });

    let mut labeled = synth.clone();
    for (sample, map) in labeled.samples.iter_mut().zip(maps) {
        let prob = map?;
        let mask = prob.mapv(|p| u8::from(p >= threshold));
        let mask_path = out_dir.join(format!("{}.png", sample.id));
        save_mask(&mask_path, &mask)?;
        save_gray16(&out_dir.join(format!("{}_soft.png", sample.id)), &prob)?;
        sample.vessel_path = Some(mask_path);
    }
    labeled
        .metadata
        .insert("pseudo_label_threshold".to_string(), threshold.to_string());
    Ok(labeled)
}

/// Split a labeled training manifest into train/validation parts, holding
/// out the trailing `fraction` of samples (at least one) for validation.
pub fn holdout_split(
    manifest: &DatasetManifest,
    fraction: f64,
) -> Result<(DatasetManifest, DatasetManifest), PipelineError> {
    let n = manifest.len();
    if n < 2 {
        return Err(PipelineError::Config {
            message: format!("holdout split needs at least 2 samples, got {n}"),
        });
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(PipelineError::Config {
            message: format!("holdout fraction must lie strictly inside (0, 1), got {fraction}"),
        });
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut train = manifest.clone();
    let mut val = manifest.clone();
    val.samples = train.samples.split_off(n - k);
    Ok((train, val))
}

fn atomic_write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let json = serde_json::to_string_pretty(value).expect("state serializes") + "\n";
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, json).map_err(|source| PipelineError::Io {
        path: tmp.clone(),
        source,
    })?;
    std::fs::rename(&tmp, path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Drives one pipeline run through its stages, persisting state after each.
pub struct PipelineRunner {
    run_dir: PathBuf,
    cfg: PipelineConfig,
    train_cfg: TrainConfig,
    model_cfg: SAUNetConfig,
    state: PipelineState,
}

impl PipelineRunner {
    /// Start a new run in `run_dir`, or resume the one already there. A
    /// resumed run must use the same pipeline, training, and model
    /// configuration it was started with.
    pub fn new(
        run_dir: &Path,
        cfg: PipelineConfig,
        train_cfg: TrainConfig,
        model_cfg: SAUNetConfig,
        real_train: &DatasetManifest,
        real_val: &DatasetManifest,
        test: &DatasetManifest,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        model_cfg.validate()?;
        let hash = config_fingerprint(&cfg, &train_cfg, &model_cfg);
        let state_path = run_dir.join("state.json");
        let state = if state_path.is_file() {
            let text = std::fs::read_to_string(&state_path).map_err(|source| {
                PipelineError::Io {
                    path: state_path.clone(),
                    source,
                }
            })?;
            let state: PipelineState =
                serde_json::from_str(&text).map_err(|e| PipelineError::StateFormat {
                    path: state_path.clone(),
                    detail: e.to_string(),
                })?;
            if state.config_hash != hash {
                return Err(PipelineError::StaleState {
                    path: state_path,
                    detail: "configuration changed since the run started".into(),
                });
            }
            state
        } else {
            let manifest_dir = run_dir.join("manifests");
            std::fs::create_dir_all(&manifest_dir).map_err(|source| PipelineError::Io {
                path: manifest_dir.clone(),
                source,
            })?;
            let real_train_path = manifest_dir.join("train.json");
            let real_val_path = manifest_dir.join("val.json");
            let test_path = manifest_dir.join("test.json");
            real_train.save(&real_train_path)?;
            real_val.save(&real_val_path)?;
            test.save(&test_path)?;
            let state = PipelineState {
                config_hash: hash,
                iteration: 1,
                stage: Stage::BaseTrain,
                real_train: real_train_path,
                real_val: real_val_path,
                test: test_path,
                synthetic: None,
                labeled_synthetic: None,
                checkpoints: Vec::new(),
                reports: Vec::new(),
            };
            atomic_write_json(&state_path, &state)?;
            state
        };
        Ok(PipelineRunner {
            run_dir: run_dir.to_path_buf(),
            cfg,
            train_cfg,
            model_cfg,
            state,
        })
    }

    pub fn state(&self) -> &PipelineState {
        &self.state
    }

    /// Execute the next stage; returns the stage that ran, or `None` when
    /// the run is already done.
    pub fn step(&mut self) -> Result<Option<Stage>, PipelineError> {
        let stage = self.state.stage;
        match stage {
            Stage::BaseTrain => self.base_train()?,
            Stage::Generate => self.generate()?,
            Stage::PseudoLabel => self.pseudo_label_stage()?,
            Stage::Retrain => self.retrain()?,
            Stage::Finetune => self.finetune()?,
            Stage::Done => return Ok(None),
        }
        atomic_write_json(&self.run_dir.join("state.json"), &self.state)?;
        Ok(Some(stage))
    }

    /// Run every remaining stage.
    pub fn run(&mut self) -> Result<PipelineState, PipelineError> {
        while self.step()?.is_some() {}
        Ok(self.state.clone())
    }

    fn load_manifest(path: &Path) -> Result<DatasetManifest, PipelineError> {
        Ok(DatasetManifest::load(path)?)
    }

    /// Training configuration for a stage: augmentation on or off, and only
    /// the requested phase's epochs.
    fn stage_train_cfg(&self, augment: bool, phase1: bool, phase2: bool) -> TrainConfig {
        let mut cfg = self.train_cfg.clone();
        if !augment {
            cfg.augmentation.enabled = false;
        }
        if !phase1 {
            cfg.epochs_phase1 = 0;
        }
        if !phase2 {
            cfg.epochs_phase2 = 0;
        }
        cfg
    }

    /// The checkpoint pseudo-labeling should use: the newest one.
    fn latest_checkpoint(&self) -> Result<&Path, PipelineError> {
        self.state
            .checkpoints
            .last()
            .map(PathBuf::as_path)
            .ok_or_else(|| PipelineError::Config {
                message: "no checkpoint recorded yet; the base training stage must run first"
                    .into(),
            })
    }

    fn write_test_report(&mut self, ckpt: &Path, name: &str) -> Result<(), PipelineError> {
        let test = Self::load_manifest(&self.state.test)?;
        let (net, _) = SAUNet::load_checkpoint(ckpt)?;
        let report = evaluate_model(&net, &test, REPORT_THRESHOLD)?;
        let dir = self.run_dir.join("reports");
        std::fs::create_dir_all(&dir).map_err(|source| PipelineError::Io {
            path: dir.clone(),
            source,
        })?;
        let path = dir.join(format!("{name}.json"));
        write_report_json(&path, &report)?;
        self.state.reports.push(path);
        Ok(())
    }

    fn base_train(&mut self) -> Result<(), PipelineError> {
        let data = Self::load_manifest(&self.state.real_train)?;
        let val = Self::load_manifest(&self.state.real_val)?;
        let mut net = SAUNet::new(
            self.model_cfg.clone(),
            derive_seed(self.train_cfg.seed, "pipeline-init", &[0]),
        )?;
        let cfg = self.stage_train_cfg(self.cfg.augment_real, true, true);
        let out = self.run_dir.join("base");
        let record = train(&mut net, &data, &cfg, &val, &out)?;
        record.write_csv(&out.join("history.csv"))?;
        let best = record
            .best_checkpoint
            .expect("a run with epochs always records a best checkpoint");
        self.write_test_report(&best, "base")?;
        self.state.checkpoints.push(best);
        self.state.stage = Stage::Generate;
        Ok(())
    }

    fn generate(&mut self) -> Result<(), PipelineError> {
        let iter = self.state.iteration;
        let real = Self::load_manifest(&self.state.real_train)?;
        let out = self.run_dir.join("synthetic").join(format!("iter{iter}"));
        let mut manifest = match &self.cfg.generator_source {
            GeneratorSource::ToyProcedural => toy_generate(
                &out,
                self.cfg.synthetic_count,
                derive_seed(self.train_cfg.seed, "toygen", &[iter as u64]),
                real.target_size,
            )?,
            GeneratorSource::ExternalDir(dir) => {
                let mut m = load_synthetic_images(dir)?;
                if m.len() < self.cfg.synthetic_count {
                    return Err(PipelineError::Config {
                        message: format!(
                            "synthetic_count {} exceeds the {} images available in {}",
                            self.cfg.synthetic_count,
                            m.len(),
                            dir.display()
                        ),
                    });
                }
                m.samples.truncate(self.cfg.synthetic_count);
                std::fs::create_dir_all(&out).map_err(|source| PipelineError::Io {
                    path: out.clone(),
                    source,
                })?;
                m.with_target_size(real.target_size)?
            }
        };
        manifest
            .metadata
            .extend(self.cfg.generator_metadata.clone());
        let path = out.join("manifest.json");
        manifest.save(&path)?;
        self.state.synthetic = Some(path);
        self.state.stage = Stage::PseudoLabel;
        Ok(())
    }

    fn pseudo_label_stage(&mut self) -> Result<(), PipelineError> {
        let iter = self.state.iteration;
        let synth_path = self
            .state
            .synthetic
            .clone()
            .expect("generate stage persisted a synthetic manifest");
        let synth = Self::load_manifest(&synth_path)?;
        let (net, _) = SAUNet::load_checkpoint(self.latest_checkpoint()?)?;
        let out = self
            .run_dir
            .join("pseudo_labels")
            .join(format!("iter{iter}"));
        let labeled = pseudo_label(&net, &synth, self.cfg.pseudo_label_threshold, &out)?;
        let path = out.join("manifest.json");
        labeled.save(&path)?;
        self.state.labeled_synthetic = Some(path);
        self.state.stage = Stage::Retrain;
        Ok(())
    }

    /// (manifest, augment) for the stage that consumes the given pool.
    fn pool(&self, synth_first: bool) -> Result<(DatasetManifest, bool), PipelineError> {
        let use_synth = match self.cfg.order {
            MixOrder::RealThenSynth => synth_first,
            MixOrder::SynthThenReal => !synth_first,
        };
        if use_synth {
            let path = self
                .state
                .labeled_synthetic
                .clone()
                .expect("pseudo-label stage persisted a labeled manifest");
            Ok((Self::load_manifest(&path)?, self.cfg.augment_synth))
        } else {
            Ok((
                Self::load_manifest(&self.state.real_train)?,
                self.cfg.augment_real,
            ))
        }
    }

    fn retrain(&mut self) -> Result<(), PipelineError> {
        let iter = self.state.iteration;
        let (data, augment) = self.pool(false)?;
        let val = Self::load_manifest(&self.state.real_val)?;
        let mut net = if self.cfg.warm_start {
            SAUNet::load_checkpoint(self.latest_checkpoint()?)?.0
        } else {
            SAUNet::new(
                self.model_cfg.clone(),
                derive_seed(self.train_cfg.seed, "pipeline-init", &[iter as u64]),
            )?
        };
        let cfg = self.stage_train_cfg(augment, true, false);
        let out = self.run_dir.join(format!("retrain_iter{iter}"));
        let record = train(&mut net, &data, &cfg, &val, &out)?;
        record.write_csv(&out.join("history.csv"))?;
        let best = record
            .best_checkpoint
            .expect("a run with epochs always records a best checkpoint");
        self.state.checkpoints.push(best);
        self.state.stage = Stage::Finetune;
        Ok(())
    }

    fn finetune(&mut self) -> Result<(), PipelineError> {
        let iter = self.state.iteration;
        let (data, augment) = self.pool(true)?;
        let val = Self::load_manifest(&self.state.real_val)?;
        let cfg = self.stage_train_cfg(augment, false, true);
        if cfg.epochs_phase2 > 0 {
            let (mut net, _) = SAUNet::load_checkpoint(self.latest_checkpoint()?)?;
            let out = self.run_dir.join(format!("finetune_iter{iter}"));
            let record = fine_tune(&mut net, &data, &cfg, &val, &out)?;
            record.write_csv(&out.join("history.csv"))?;
            let best = record
                .best_checkpoint
                .expect("a run with epochs always records a best checkpoint");
            self.state.checkpoints.push(best);
        }
        // Report for this iteration comes from the newest checkpoint (the
        // fine-tuned model, or the retrained one if fine-tuning was skipped).
        let ckpt = self.latest_checkpoint()?.to_path_buf();
        self.write_test_report(&ckpt, &format!("iter{iter}"))?;
        if iter < self.cfg.iterations {
            self.state.iteration = iter + 1;
            self.state.stage = Stage::Generate;
        } else {
            self.state.stage = Stage::Done;
        }
        Ok(())
    }
}

fn config_fingerprint(
    cfg: &PipelineConfig,
    train_cfg: &TrainConfig,
    model_cfg: &SAUNetConfig,
) -> u64 {
    let blob = serde_json::to_string(&(cfg, train_cfg, model_cfg))
        .expect("configurations serialize");
    content_hash(blob.as_bytes())
}

/// Assemble and run a full pipeline from a DRIVE-format data root: loads
/// the train and test splits, holds out a validation slice of the training
/// set, then drives every stage to completion.
pub fn run_pipeline(
    cfg: PipelineConfig,
    train_cfg: TrainConfig,
    model_cfg: SAUNetConfig,
    data_root: &Path,
    run_dir: &Path,
    target_size: usize,
) -> Result<PipelineState, PipelineError> {
    let train_all = load_drive_dataset(data_root, Split::Train)?.with_target_size(target_size)?;
    let test = load_drive_dataset(data_root, Split::Test)?.with_target_size(target_size)?;
    let (train_m, val_m) = holdout_split(&train_all, VALIDATION_FRACTION)?;
    PipelineRunner::new(run_dir, cfg, train_cfg, model_cfg, &train_m, &val_m, &test)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AugmentationSpec, SampleRef, SampleSource};
    use crate::imgproc::{load_mask, save_mask, save_rgb8};
    use ndarray::{Array2, Array3};

    struct ConstantHalf;

    impl Predictor for ConstantHalf {
        fn predict(
            &self,
            image: &Array3<f64>,
        ) -> Result<Array2<f64>, crate::metrics::PredictorError> {
            let (h, w, _) = image.dim();
            Ok(Array2::from_elem((h, w), 0.5))
        }
    }

    fn write_drive_style_sample(dir: &Path, i: usize, side: usize, labeled: bool) -> SampleRef {
        let img = Array3::from_shape_fn((side, side, 3), |(y, x, c)| {
            0.15 + 0.7 * (((y * 5 + x * 7 + i * 13 + c * 3) % 17) as f64 / 17.0)
        });
        let mask = Array2::from_shape_fn((side, side), |(_, x)| {
            u8::from(x % (side / 4) < 2)
        });
        let fov = Array2::from_elem((side, side), 1u8);
        let image_path = dir.join(format!("r{i}.png"));
        let vessel_path = dir.join(format!("r{i}_vessel.png"));
        let fov_path = dir.join(format!("r{i}_fov.png"));
        save_rgb8(&image_path, &img).unwrap();
        save_mask(&vessel_path, &mask).unwrap();
        save_mask(&fov_path, &fov).unwrap();
        SampleRef {
            id: format!("real{i}"),
            image_path,
            vessel_path: labeled.then_some(vessel_path),
            fov_path: Some(fov_path),
            source: SampleSource::Real,
        }
    }

    fn real_manifest(dir: &Path, count: usize, side: usize, split: Split) -> DatasetManifest {
        DatasetManifest {
            samples: (0..count)
                .map(|i| write_drive_style_sample(dir, i, side, true))
                .collect(),
            split,
            target_size: side,
            warnings: Vec::new(),
            metadata: Default::default(),
        }
    }

    fn tiny_model_cfg() -> SAUNetConfig {
        SAUNetConfig {
            in_channels: 3,
            base_width: 2,
            depth: 1,
            dropblock_size: 3,
            dropblock_keep_prob: 0.95,
            attention_kernel: 3,
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs_phase1: 1,
            lr_phase1: 1e-3,
            epochs_phase2: 1,
            lr_phase2: 1e-4,
            batch_size: 2,
            loss_weights: (0.5, 0.5),
            seed: 13,
            augmentation: AugmentationSpec::disabled(),
        }
    }

    fn tiny_pipeline_cfg() -> PipelineConfig {
        PipelineConfig {
            generator_source: GeneratorSource::ToyProcedural,
            synthetic_count: 2,
            order: MixOrder::RealThenSynth,
            augment_real: false,
            augment_synth: false,
            iterations: 1,
            pseudo_label_threshold: 0.5,
            warm_start: false,
            generator_metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn pseudo_label_applies_the_tie_rule_and_persists_soft_maps() {
        let data_dir = tempfile::tempdir().unwrap();
        let out_dir = tempfile::tempdir().unwrap();
        let synth = toy_generate(data_dir.path(), 2, 3, 16).unwrap();
        let labeled = pseudo_label(&ConstantHalf, &synth, 0.5, out_dir.path()).unwrap();
        assert_eq!(labeled.len(), 2);
        for s in &labeled.samples {
            assert_eq!(s.source, SampleSource::Synthetic, "source must stay synthetic");
            let mask = load_mask(s.vessel_path.as_ref().unwrap()).unwrap();
            assert!(
                mask.iter().all(|&v| v == 1),
                "0.5 vs threshold 0.5 ties positive under the >= rule"
            );
            assert!(
                out_dir.path().join(format!("{}_soft.png", s.id)).is_file(),
                "soft probability map must be persisted alongside the mask"
            );
        }
    }

    #[test]
    fn pseudo_label_refuses_labeled_input() {
        let data_dir = tempfile::tempdir().unwrap();
        let out_dir = tempfile::tempdir().unwrap();
        let mut synth = toy_generate(data_dir.path(), 2, 3, 16).unwrap();
        synth.samples[1].vessel_path = Some(data_dir.path().join("fake.png"));
        let err = pseudo_label(&ConstantHalf, &synth, 0.5, out_dir.path()).unwrap_err();
        match err {
            PipelineError::AlreadyLabeled { id } => assert_eq!(id, "synth0001"),
            other => panic!("expected AlreadyLabeled, got {other}"),
        }
    }

    #[test]
    fn pseudo_labels_match_recomputed_predictions_and_rerun_identically() {
        let data_dir = tempfile::tempdir().unwrap();
        let out_a = tempfile::tempdir().unwrap();
        let out_b = tempfile::tempdir().unwrap();
        let synth = toy_generate(data_dir.path(), 3, 8, 16).unwrap();
        let net = SAUNet::new(tiny_model_cfg(), 21).unwrap();

        let labeled = pseudo_label(&net, &synth, 0.5, out_a.path()).unwrap();
        for (idx, s) in labeled.samples.iter().enumerate() {
            let sample = synth.load_preprocessed(idx).unwrap();
            let prob = net.predict(&sample.image).unwrap();
            let expect = prob.mapv(|p| u8::from(p >= 0.5));
            let got = load_mask(s.vessel_path.as_ref().unwrap()).unwrap();
            assert_eq!(got, expect, "{} mask must equal the thresholded forward pass", s.id);
        }

        pseudo_label(&net, &synth, 0.5, out_b.path()).unwrap();
        for s in &synth.samples {
            let a = std::fs::read(out_a.path().join(format!("{}.png", s.id))).unwrap();
            let b = std::fs::read(out_b.path().join(format!("{}.png", s.id))).unwrap();
            assert_eq!(a, b, "re-labeling with the same model must be identical");
        }
    }

    #[test]
    fn holdout_split_keeps_sizes_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = real_manifest(dir.path(), 20, 16, Split::Train);
        let (train, val) = holdout_split(&manifest, 0.1).unwrap();
        assert_eq!(train.len(), 18);
        assert_eq!(val.len(), 2);
        assert_eq!(train.samples[0].id, "real0");
        assert_eq!(val.samples[0].id, "real18", "validation takes the tail");
        let tiny = real_manifest(dir.path(), 2, 16, Split::Train);
        let (t2, v2) = holdout_split(&tiny, 0.1).unwrap();
        assert_eq!((t2.len(), v2.len()), (1, 1), "at least one sample each");
    }

    #[test]
    fn full_toy_run_completes_every_stage_with_artifacts() {
        let data_dir = tempfile::tempdir().unwrap();
        let run_dir = tempfile::tempdir().unwrap();
        let train_m = real_manifest(data_dir.path(), 3, 16, Split::Train);
        let (train_m, val_m) = holdout_split(&train_m, 0.34).unwrap();
        let test_m = real_manifest(data_dir.path(), 2, 16, Split::Test);

        let mut runner = PipelineRunner::new(
            run_dir.path(),
            tiny_pipeline_cfg(),
            tiny_train_cfg(),
            tiny_model_cfg(),
            &train_m,
            &val_m,
            &test_m,
        )
        .unwrap();
        let state = runner.run().unwrap();

        assert_eq!(state.stage, Stage::Done);
        assert_eq!(state.iteration, 1);
        assert!(
            state.checkpoints.len() >= 2,
            "base + retrain + finetune should leave at least two checkpoints"
        );
        for ckpt in &state.checkpoints {
            assert!(ckpt.is_file(), "missing checkpoint {}", ckpt.display());
        }
        assert_eq!(state.reports.len(), 2, "base report plus one per iteration");
        for report in &state.reports {
            let text = std::fs::read_to_string(report).unwrap();
            let parsed: crate::metrics::MetricsReport = serde_json::from_str(&text).unwrap();
            assert!(parsed.acc.is_finite());
        }
        assert!(run_dir.path().join("state.json").is_file());
        assert!(run_dir.path().join("base/history.csv").is_file());
        assert!(run_dir.path().join("retrain_iter1/history.csv").is_file());
        assert!(run_dir.path().join("finetune_iter1/history.csv").is_file());
        // Pseudo-label artifacts live under pseudo_labels/iter1.
        assert!(run_dir
            .path()
            .join("pseudo_labels/iter1/manifest.json")
            .is_file());
    }

    #[test]
    fn killed_run_resumes_at_the_interrupted_stage() {
        let data_dir = tempfile::tempdir().unwrap();
        let run_dir = tempfile::tempdir().unwrap();
        let train_m = real_manifest(data_dir.path(), 3, 16, Split::Train);
        let (train_m, val_m) = holdout_split(&train_m, 0.34).unwrap();
        let test_m = real_manifest(data_dir.path(), 2, 16, Split::Test);

        let make_runner = || {
            PipelineRunner::new(
                run_dir.path(),
                tiny_pipeline_cfg(),
                tiny_train_cfg(),
                tiny_model_cfg(),
                &train_m,
                &val_m,
                &test_m,
            )
            .unwrap()
        };

        // Run base_train + generate, then drop the runner mid-pipeline.
        let mut first = make_runner();
        assert_eq!(first.step().unwrap(), Some(Stage::BaseTrain));
        assert_eq!(first.step().unwrap(), Some(Stage::Generate));
        let base_ckpt = first.state().checkpoints[0].clone();
        let base_bytes = std::fs::read(&base_ckpt).unwrap();
        drop(first);

        let mut resumed = make_runner();
        assert_eq!(
            resumed.state().stage,
            Stage::PseudoLabel,
            "resume must pick up after the last persisted stage"
        );
        let state = resumed.run().unwrap();
        assert_eq!(state.stage, Stage::Done);
        assert_eq!(
            std::fs::read(&base_ckpt).unwrap(),
            base_bytes,
            "resuming must not redo (or touch) the base training stage"
        );
    }

    #[test]
    fn resume_with_changed_configuration_is_refused() {
        let data_dir = tempfile::tempdir().unwrap();
        let run_dir = tempfile::tempdir().unwrap();
        let train_m = real_manifest(data_dir.path(), 3, 16, Split::Train);
        let (train_m, val_m) = holdout_split(&train_m, 0.34).unwrap();
        let test_m = real_manifest(data_dir.path(), 2, 16, Split::Test);

        let mut first = PipelineRunner::new(
            run_dir.path(),
            tiny_pipeline_cfg(),
            tiny_train_cfg(),
            tiny_model_cfg(),
            &train_m,
            &val_m,
            &test_m,
        )
        .unwrap();
        first.step().unwrap();
        drop(first);

        let mut other_cfg = tiny_pipeline_cfg();
        other_cfg.synthetic_count = 3;
        let err = PipelineRunner::new(
            run_dir.path(),
            other_cfg,
            tiny_train_cfg(),
            tiny_model_cfg(),
            &train_m,
            &val_m,
            &test_m,
        )
        .err()
        .expect("changed configuration must refuse to resume");
        assert!(matches!(err, PipelineError::StaleState { .. }), "got {err}");
    }

    #[test]
    fn two_seeded_runs_are_reproducible() {
        let data_dir = tempfile::tempdir().unwrap();
        let train_m = real_manifest(data_dir.path(), 3, 16, Split::Train);
        let (train_m, val_m) = holdout_split(&train_m, 0.34).unwrap();
        let test_m = real_manifest(data_dir.path(), 2, 16, Split::Test);

        let run = |run_dir: &Path| {
            PipelineRunner::new(
                run_dir,
                tiny_pipeline_cfg(),
                tiny_train_cfg(),
                tiny_model_cfg(),
                &train_m,
                &val_m,
                &test_m,
            )
            .unwrap()
            .run()
            .unwrap()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let state_a = run(dir_a.path());
        let state_b = run(dir_b.path());

        for (a, b) in state_a.checkpoints.iter().zip(&state_b.checkpoints) {
            let (net_a, _) = SAUNet::load_checkpoint(a).unwrap();
            let (net_b, _) = SAUNet::load_checkpoint(b).unwrap();
            assert_eq!(
                net_a.params().state_hash(),
                net_b.params().state_hash(),
                "checkpoint parameters must match between seeded runs"
            );
        }
        for (a, b) in state_a.reports.iter().zip(&state_b.reports) {
            assert_eq!(
                std::fs::read(a).unwrap(),
                std::fs::read(b).unwrap(),
                "reports must be byte-identical between seeded runs"
            );
        }
    }

    #[test]
    fn synth_then_real_order_retrains_on_synthetic_data() {
        // With order swapped, the retrain stage consumes the pseudo-labeled
        // pool; the run must still complete and fine-tune on real data.
        let data_dir = tempfile::tempdir().unwrap();
        let run_dir = tempfile::tempdir().unwrap();
        let train_m = real_manifest(data_dir.path(), 3, 16, Split::Train);
        let (train_m, val_m) = holdout_split(&train_m, 0.34).unwrap();
        let test_m = real_manifest(data_dir.path(), 2, 16, Split::Test);
        let cfg = PipelineConfig {
            order: MixOrder::SynthThenReal,
            ..tiny_pipeline_cfg()
        };
        let state = PipelineRunner::new(
            run_dir.path(),
            cfg,
            tiny_train_cfg(),
            tiny_model_cfg(),
            &train_m,
            &val_m,
            &test_m,
        )
        .unwrap()
        .run()
        .unwrap();
        assert_eq!(state.stage, Stage::Done);
        let retrain_csv =
            std::fs::read_to_string(run_dir.path().join("retrain_iter1/history.csv")).unwrap();
        assert!(retrain_csv.lines().count() >= 2, "retrain history recorded");
    }
}
