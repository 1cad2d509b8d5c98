//! Ensemble fusion of segmentation models.
//!
//! Members are anything that predicts a probability map; fusion is
//! per-pixel mean, max, min, or majority vote on the binarized members.
//! The fused soft map binarizes with the usual `>=` tie rule, so an
//! ensemble drops into every evaluation path a single model fits.

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::metrics::{Predictor, PredictorError};
use crate::model::SAUNet;
use crate::pipeline::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    /// Average of member probabilities (the default combination).
    Mean,
    /// Per-pixel maximum: a sensitivity-oriented variant.
    Max,
    /// Per-pixel minimum: the conservative counterpart.
    Min,
    /// Majority vote over members binarized at the ensemble threshold.
    Vote,
}

/// Declarative ensemble description: checkpoints to load plus the fusion
/// rule and binarization threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<PathBuf>,
    pub mode: EnsembleMode,
    pub threshold: f64,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.members.len() < 2 {
            return Err(PipelineError::Config {
                message: format!(
                    "an ensemble needs at least 2 members, got {}",
                    self.members.len()
                ),
            });
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(PipelineError::Config {
                message: format!(
                    "ensemble threshold must lie strictly inside (0, 1), got {}",
                    self.threshold
                ),
            });
        }
        Ok(())
    }
}

/// A fused predictor over in-memory members.
pub struct Ensemble {
    members: Vec<Box<dyn Predictor>>,
    mode: EnsembleMode,
    threshold: f64,
}

impl Ensemble {
    pub fn from_members(
        members: Vec<Box<dyn Predictor>>,
        mode: EnsembleMode,
        threshold: f64,
    ) -> Result<Self, PipelineError> {
        let placeholder = EnsembleSpec {
            members: vec![PathBuf::new(); members.len()],
            mode,
            threshold,
        };
        placeholder.validate()?;
        Ok(Ensemble {
            members,
            mode,
            threshold,
        })
    }

    /// Load every member checkpoint listed in `spec`.
    pub fn load(spec: &EnsembleSpec) -> Result<Self, PipelineError> {
        spec.validate()?;
        let mut members: Vec<Box<dyn Predictor>> = Vec::with_capacity(spec.members.len());
        for path in &spec.members {
            let (net, _) = SAUNet::load_checkpoint(path)?;
            members.push(Box::new(net));
        }
        Ok(Ensemble {
            members,
            mode: spec.mode,
            threshold: spec.threshold,
        })
    }

    pub fn mode(&self) -> EnsembleMode {
        self.mode
    }

    /// Fused probability map for one image.
    pub fn predict_soft(&self, image: &Array3<f64>) -> Result<Array2<f64>, PipelineError> {
        let mut maps = Vec::with_capacity(self.members.len());
        for (i, member) in self.members.iter().enumerate() {
            let map = member
                .predict(image)
                .map_err(|e| PipelineError::Predict {
                    detail: format!("ensemble member {i}: {e}"),
                })?;
            if let Some(first) = maps.first() {
                let first: &Array2<f64> = first;
                if first.dim() != map.dim() {
                    return Err(PipelineError::MemberShape {
                        detail: format!(
                            "member 0 produced {:?} but member {i} produced {:?}",
                            first.dim(),
                            map.dim()
                        ),
                    });
                }
            }
            maps.push(map);
        }
        let n = maps.len() as f64;
        let mut fused = Array2::zeros(maps[0].dim());
        match self.mode {
            EnsembleMode::Mean => {
                for m in &maps {
                    fused += m;
                }
                fused /= n;
            }
            EnsembleMode::Max => {
                fused.assign(&maps[0]);
                for m in &maps[1..] {
                    ndarray::Zip::from(&mut fused).and(m).for_each(|f, &v| {
                        if v > *f {
                            *f = v;
                        }
                    });
                }
            }
            EnsembleMode::Min => {
                fused.assign(&maps[0]);
                for m in &maps[1..] {
                    ndarray::Zip::from(&mut fused).and(m).for_each(|f, &v| {
                        if v < *f {
                            *f = v;
                        }
                    });
                }
            }
            EnsembleMode::Vote => {
                // Soft map = fraction of members voting positive.
                for m in &maps {
                    ndarray::Zip::from(&mut fused).and(m).for_each(|f, &v| {
                        if v >= self.threshold {
                            *f += 1.0;
                        }
                    });
                }
                fused /= n;
            }
        }
        Ok(fused)
    }

    /// Fused probability map plus its binarization. Mean/max/min binarize at
    /// the ensemble threshold; vote binarizes at half the members (ties
    /// count as positive, consistent with the `>=` rule everywhere else).
    pub fn predict_maps(
        &self,
        image: &Array3<f64>,
    ) -> Result<(Array2<f64>, Array2<u8>), PipelineError> {
        let soft = self.predict_soft(image)?;
        let cut = match self.mode {
            EnsembleMode::Vote => 0.5,
            _ => self.threshold,
        };
        let binary = soft.mapv(|p| u8::from(p >= cut));
        Ok((soft, binary))
    }
}

impl Predictor for Ensemble {
    fn predict(&self, image: &Array3<f64>) -> Result<Array2<f64>, PredictorError> {
        self.predict_soft(image).map_err(PredictorError::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetManifest, SampleRef, SampleSource, Split};
    use crate::imgproc::{save_mask, save_rgb8};
    use crate::metrics::evaluate_model;
    use crate::model::SAUNetConfig;
    use ndarray::Array3 as A3;

    /// Constant-probability stub member with a configurable output size.
    struct Constant {
        value: f64,
        side: usize,
    }

    impl Predictor for Constant {
        fn predict(&self, _image: &Array3<f64>) -> Result<Array2<f64>, PredictorError> {
            Ok(Array2::from_elem((self.side, self.side), self.value))
        }
    }

    fn constant(value: f64, side: usize) -> Box<dyn Predictor> {
        Box::new(Constant { value, side })
    }

    fn image(side: usize) -> A3<f64> {
        A3::from_elem((side, side, 3), 0.5)
    }

    #[test]
    fn too_few_members_or_bad_threshold_is_rejected() {
        let err = Ensemble::from_members(vec![constant(0.5, 4)], EnsembleMode::Mean, 0.5)
            .err()
            .expect("one member must be rejected");
        assert!(matches!(err, PipelineError::Config { .. }));
        let err = Ensemble::from_members(
            vec![constant(0.5, 4), constant(0.5, 4)],
            EnsembleMode::Mean,
            1.0,
        )
        .err()
        .expect("threshold 1.0 must be rejected");
        assert!(matches!(err, PipelineError::Config { .. }));
    }

    #[test]
    fn mismatched_member_shapes_error() {
        let e = Ensemble::from_members(
            vec![constant(0.5, 4), constant(0.5, 5)],
            EnsembleMode::Mean,
            0.5,
        )
        .unwrap();
        let err = e.predict_soft(&image(4)).unwrap_err();
        assert!(matches!(err, PipelineError::MemberShape { .. }), "got {err}");
    }

    #[test]
    fn constant_members_fuse_to_hand_values() {
        let img = image(4);
        let members = || vec![constant(0.2, 4), constant(0.8, 4)];

        let mean = Ensemble::from_members(members(), EnsembleMode::Mean, 0.5).unwrap();
        let (soft, binary) = mean.predict_maps(&img).unwrap();
        assert!(soft.iter().all(|&p| (p - 0.5).abs() < 1e-15));
        assert!(
            binary.iter().all(|&b| b == 1),
            "0.5 vs threshold 0.5 ties positive under the >= rule"
        );

        let max = Ensemble::from_members(members(), EnsembleMode::Max, 0.5).unwrap();
        assert!(max
            .predict_soft(&img)
            .unwrap()
            .iter()
            .all(|&p| (p - 0.8).abs() < 1e-15));

        let min = Ensemble::from_members(members(), EnsembleMode::Min, 0.5).unwrap();
        assert!(min
            .predict_soft(&img)
            .unwrap()
            .iter()
            .all(|&p| (p - 0.2).abs() < 1e-15));

        // Vote at threshold 0.5: one of two members positive → tie → positive.
        let vote = Ensemble::from_members(members(), EnsembleMode::Vote, 0.5).unwrap();
        let (soft, binary) = vote.predict_maps(&img).unwrap();
        assert!(soft.iter().all(|&p| (p - 0.5).abs() < 1e-15));
        assert!(binary.iter().all(|&b| b == 1));
    }

    #[test]
    fn mean_of_identical_members_equals_the_single_model() {
        let cfg = SAUNetConfig {
            in_channels: 3,
            base_width: 2,
            depth: 1,
            dropblock_size: 3,
            dropblock_keep_prob: 0.9,
            attention_kernel: 3,
        };
        let net = crate::model::SAUNet::new(cfg, 11).unwrap();
        let img = A3::from_shape_fn((8, 8, 3), |(y, x, c)| {
            ((y * 5 + x * 3 + c) % 9) as f64 / 9.0
        });
        let single = net.predict(&img).unwrap();

        let cfg2 = net.config().clone();
        let a = crate::model::SAUNet::new(cfg2.clone(), 11).unwrap();
        let b = crate::model::SAUNet::new(cfg2, 11).unwrap();
        let e = Ensemble::from_members(
            vec![Box::new(a), Box::new(b)],
            EnsembleMode::Mean,
            0.5,
        )
        .unwrap();
        let fused = e.predict_soft(&img).unwrap();
        assert_eq!(
            fused, single,
            "averaging two bit-identical members must reproduce the member"
        );
    }

    #[test]
    fn max_mode_sensitivity_dominates_mean_dominates_min() {
        // Two differently initialized (untrained) networks still order: the
        // max fusion can only add predicted positives over the mean, and the
        // mean over the min, so recall is monotone across the three modes.
        let dir = tempfile::tempdir().unwrap();
        let side = 16usize;
        let img = A3::from_shape_fn((side, side, 3), |(y, x, c)| {
            ((y * 7 + x * 5 + c * 3) % 11) as f64 / 11.0
        });
        let mask = Array2::from_shape_fn((side, side), |(y, x)| u8::from((y + x) % 3 == 0));
        let fov = Array2::from_elem((side, side), 1u8);
        let image_path = dir.path().join("img.png");
        let vessel_path = dir.path().join("vessel.png");
        let fov_path = dir.path().join("fov.png");
        save_rgb8(&image_path, &img).unwrap();
        save_mask(&vessel_path, &mask).unwrap();
        save_mask(&fov_path, &fov).unwrap();
        let manifest = DatasetManifest {
            samples: vec![SampleRef {
                id: "t".into(),
                image_path,
                vessel_path: Some(vessel_path),
                fov_path: Some(fov_path),
                source: SampleSource::Real,
            }],
            split: Split::Test,
            target_size: side,
            warnings: Vec::new(),
            metadata: Default::default(),
        };

        let cfg = SAUNetConfig {
            in_channels: 3,
            base_width: 2,
            depth: 1,
            dropblock_size: 3,
            dropblock_keep_prob: 0.9,
            attention_kernel: 3,
        };
        let members = |mode| {
            Ensemble::from_members(
                vec![
                    Box::new(crate::model::SAUNet::new(cfg.clone(), 1).unwrap())
                        as Box<dyn Predictor>,
                    Box::new(crate::model::SAUNet::new(cfg.clone(), 2).unwrap()),
                    Box::new(crate::model::SAUNet::new(cfg.clone(), 3).unwrap()),
                ],
                mode,
                0.5,
            )
            .unwrap()
        };
        let se_max = evaluate_model(&members(EnsembleMode::Max), &manifest, 0.5)
            .unwrap()
            .se;
        let se_mean = evaluate_model(&members(EnsembleMode::Mean), &manifest, 0.5)
            .unwrap()
            .se;
        let se_min = evaluate_model(&members(EnsembleMode::Min), &manifest, 0.5)
            .unwrap()
            .se;
        assert!(
            se_max >= se_mean && se_mean >= se_min,
            "sensitivity must order max >= mean >= min, got {se_max} / {se_mean} / {se_min}"
        );
    }

    #[test]
    fn mean_fusion_is_monotone_in_member_probabilities() {
        let img = image(4);
        let lo = Ensemble::from_members(
            vec![constant(0.3, 4), constant(0.4, 4)],
            EnsembleMode::Mean,
            0.5,
        )
        .unwrap();
        let hi = Ensemble::from_members(
            vec![constant(0.35, 4), constant(0.6, 4)],
            EnsembleMode::Mean,
            0.5,
        )
        .unwrap();
        let a = lo.predict_soft(&img).unwrap();
        let b = hi.predict_soft(&img).unwrap();
        assert!(
            a.iter().zip(b.iter()).all(|(x, y)| y >= x),
            "raising every member probability must not lower the fusion"
        );
    }
}
