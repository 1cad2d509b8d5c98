//! Run configuration: one TOML file that pins every knob of a run.
//!
//! A [`RunConfig`] nests the model, training, and pipeline configurations
//! next to the dataset location, output directory, and the global seed.
//! Files round-trip losslessly (parse → serialize → parse is the
//! identity), and every command writes the fully resolved configuration it
//! ran with back into its output directory, so a run can always be
//! replayed from its artifacts alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::validate_target_size;
use crate::model::SAUNetConfig;
use crate::pipeline::{EnsembleSpec, PipelineConfig};
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("could not read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("could not parse config {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("invalid configuration: {message}")]
    Invalid { message: String },
    #[error("configured {what} does not exist: {path}")]
    MissingPath { what: &'static str, path: PathBuf },
}

/// Everything a run needs, in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// DRIVE-format dataset root (contains `training`/`train` and `test`).
    pub data_root: PathBuf,
    /// Directory that receives checkpoints, reports, and state.
    pub out_dir: PathBuf,
    /// Square resolution images are resized to before the network sees them.
    pub target_size: usize,
    /// Global seed; every random stream in the run derives from it (it
    /// overrides `train.seed` when the config is resolved).
    pub seed: u64,
    pub model: SAUNetConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    /// Optional ensemble description for the `ensemble` command.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            target_size: 512,
            seed: 0,
            model: SAUNetConfig::default(),
            train: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
            ensemble: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run configuration serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml_string()).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Structural validation: field ranges and cross-field consistency.
    /// Path existence is checked separately by [`RunConfig::validate_data_root`]
    /// because not every command reads the dataset.
    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_target_size(self.target_size).map_err(|e| ConfigError::Invalid {
            message: e.to_string(),
        })?;
        self.model.validate().map_err(|e| ConfigError::Invalid {
            message: e.to_string(),
        })?;
        self.pipeline.validate().map_err(|e| ConfigError::Invalid {
            message: e.to_string(),
        })?;
        if let Some(spec) = &self.ensemble {
            spec.validate().map_err(|e| ConfigError::Invalid {
                message: e.to_string(),
            })?;
        }
        let min_side = self.target_size >> self.model.depth;
        if min_side == 0 || self.target_size % (1 << self.model.depth) != 0 {
            return Err(ConfigError::Invalid {
                message: format!(
                    "target_size {} is not divisible by 2^depth = {}",
                    self.target_size,
                    1 << self.model.depth
                ),
            });
        }
        Ok(())
    }

    pub fn validate_data_root(&self) -> Result<(), ConfigError> {
        if !self.data_root.is_dir() {
            return Err(ConfigError::MissingPath {
                what: "data_root",
                path: self.data_root.clone(),
            });
        }
        Ok(())
    }

    /// Training configuration with the global seed applied.
    pub fn effective_train_cfg(&self) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = self.seed;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{EnsembleMode, GeneratorSource, MixOrder};
    use proptest::prelude::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg, "parse(serialize(cfg)) must be the identity");
    }

    #[test]
    fn customized_config_round_trips_through_toml() {
        let cfg = RunConfig {
            data_root: PathBuf::from("/data/drive"),
            out_dir: PathBuf::from("/tmp/run1"),
            target_size: 64,
            seed: 99,
            model: SAUNetConfig {
                in_channels: 3,
                base_width: 8,
                depth: 2,
                dropblock_size: 5,
                dropblock_keep_prob: 0.85,
                attention_kernel: 5,
            },
            train: TrainConfig {
                epochs_phase1: 10,
                lr_phase1: 5e-4,
                epochs_phase2: 5,
                lr_phase2: 5e-5,
                batch_size: 4,
                loss_weights: (0.7, 0.3),
                seed: 99,
                augmentation: crate::dataset::AugmentationSpec::disabled(),
            },
            pipeline: PipelineConfig {
                generator_source: GeneratorSource::ExternalDir(PathBuf::from("/gan/out")),
                synthetic_count: 200,
                order: MixOrder::SynthThenReal,
                augment_real: false,
                augment_synth: true,
                iterations: 2,
                pseudo_label_threshold: 0.4,
                warm_start: true,
                generator_metadata: [("truncation".to_string(), "0.7".to_string())]
                    .into_iter()
                    .collect(),
            },
            ensemble: Some(EnsembleSpec {
                members: vec![PathBuf::from("a.ckpt"), PathBuf::from("b.ckpt")],
                mode: EnsembleMode::Max,
                threshold: 0.5,
            }),
        };
        let text = cfg.to_toml_string();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        // And a second cycle stays fixed.
        assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn load_applies_the_global_seed_to_training() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut cfg = RunConfig {
            seed: 7,
            ..RunConfig::default()
        };
        cfg.train.seed = 123; // stale value in the file
        cfg.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.seed, 7);
        assert_eq!(
            loaded.train.seed, 7,
            "the global seed governs the training stream"
        );
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.toml");
        std::fs::write(&path, "target_size = 128\nseed = 3\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.target_size, 128);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model, SAUNetConfig::default());
        assert_eq!(cfg.pipeline.synthetic_count, 50);
    }

    #[test]
    fn invalid_values_are_rejected_with_field_names() {
        let mut cfg = RunConfig::default();
        cfg.target_size = 500;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("500"), "got: {err}");

        let mut cfg = RunConfig::default();
        cfg.model.dropblock_size = 4;
        assert!(cfg.validate().is_err(), "even dropblock_size must fail");

        let mut cfg = RunConfig::default();
        cfg.pipeline.pseudo_label_threshold = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.data_root = PathBuf::from("/definitely/not/here");
        let err = cfg.validate_data_root().unwrap_err();
        assert!(matches!(err, ConfigError::MissingPath { .. }));
    }

    #[test]
    fn unparseable_files_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.toml");
        std::fs::write(&path, "target_size = \"many\"").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        match err {
            ConfigError::Parse { path: p, .. } => assert_eq!(p, path),
            other => panic!("expected parse error, got {other}"),
        }
    }

    proptest! {
        /// Round-trip identity over randomized numeric fields.
        #[test]
        fn toml_round_trip_is_identity(
            target_exp in 4usize..10,
            seed in 0u64..1_000_000,
            epochs1 in 0usize..200,
            epochs2 in 0usize..100,
            batch in 1usize..8,
            lr1 in 1e-6f64..1e-1,
            synth in 1usize..1001,
            iterations in 1usize..4,
            threshold in 0.05f64..0.95,
        ) {
            let mut cfg = RunConfig::default();
            cfg.target_size = 1 << target_exp;
            cfg.seed = seed;
            cfg.train.epochs_phase1 = epochs1;
            cfg.train.epochs_phase2 = epochs2;
            cfg.train.batch_size = batch;
            cfg.train.lr_phase1 = lr1;
            cfg.pipeline.synthetic_count = synth;
            cfg.pipeline.iterations = iterations;
            cfg.pipeline.pseudo_label_threshold = threshold;
            let text = cfg.to_toml_string();
            let back: RunConfig = toml::from_str(&text).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
