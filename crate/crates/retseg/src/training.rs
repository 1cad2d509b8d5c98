//! Loss, optimizer, and the two-phase training loop.
//!
//! The loss averages a soft Dice term (global sums over the whole batch)
//! with pixel-mean binary cross-entropy. Optimization is Adam; each phase
//! starts from its own learning rate and decays it by reduce-on-plateau on
//! the validation loss, while Adam's moment estimates persist across the
//! phase boundary. The best checkpoint is the epoch with the highest
//! validation F1. Everything is seeded, so two runs with the same
//! configuration produce bit-identical parameters, records, and files.

use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayD};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{augment, AugmentationSpec, DatasetError, DatasetManifest, RetinalSample};
use crate::metrics::{evaluate_model, MetricsError, MetricsReport};
use crate::model::{CheckpointMeta, Grads, Mode, ModelError, ParamStore, SAUNet};
use crate::seed::derive_seed;

/// Multiplicative learning-rate decay applied when the validation loss
/// plateaus.
pub const PLATEAU_FACTOR: f64 = 0.5;
/// Epochs without validation-loss improvement before the rate is reduced.
pub const PLATEAU_PATIENCE: usize = 10;
/// Smoothing term in the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-6;
/// Probabilities are clamped to [PROB_CLAMP, 1 − PROB_CLAMP] inside the
/// cross-entropy so perfect predictions stay finite.
pub const PROB_CLAMP: f64 = 1e-7;
/// Classification threshold used for the per-epoch validation metrics.
pub const VALIDATION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {message}")]
    Config { message: String },
    #[error("sample {id} has no vessel annotation; training data must be fully labeled")]
    Unlabeled { id: String },
    #[error("loss shape mismatch: prediction {pred:?} vs target {target:?}")]
    ShapeMismatch {
        pred: Vec<usize>,
        target: Vec<usize>,
    },
    #[error("loss target must be binary, found {value} at index {index}")]
    NonBinaryTarget { value: f64, index: usize },
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("could not write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Hyperparameters for one training run (both phases).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_phase1: usize,
    pub lr_phase1: f64,
    pub epochs_phase2: usize,
    pub lr_phase2: f64,
    pub batch_size: usize,
    /// (w_dice, w_bce); must be nonnegative and sum to 1.
    pub loss_weights: (f64, f64),
    pub seed: u64,
    pub augmentation: AugmentationSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_phase1: 100,
            lr_phase1: 1e-3,
            epochs_phase2: 50,
            lr_phase2: 1e-4,
            batch_size: 2,
            loss_weights: (0.5, 0.5),
            seed: 0,
            augmentation: AugmentationSpec::default(),
        }
    }
}

impl TrainConfig {
    /// `require_epochs` distinguishes `train` (at least one epoch) from
    /// `fine_tune` (zero additional epochs is a valid no-op).
    fn validate(&self, require_epochs: bool) -> Result<(), TrainError> {
        let bad = |message: String| Err(TrainError::Config { message });
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if require_epochs && self.epochs_phase1 + self.epochs_phase2 == 0 {
            return bad("training needs at least one epoch across both phases".into());
        }
        for (name, lr) in [("lr_phase1", self.lr_phase1), ("lr_phase2", self.lr_phase2)] {
            if !lr.is_finite() || lr < 0.0 {
                return bad(format!("{name} must be finite and nonnegative, got {lr}"));
            }
        }
        let (wd, wb) = self.loss_weights;
        if wd < 0.0 || wb < 0.0 || (wd + wb - 1.0).abs() > 1e-9 {
            return bad(format!(
                "loss_weights must be nonnegative and sum to 1, got ({wd}, {wb})"
            ));
        }
        Ok(())
    }
}

fn check_shapes(pred: &Array4<f64>, target: &Array4<f64>) -> Result<(), TrainError> {
    if pred.dim() != target.dim() {
        return Err(TrainError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            target: target.shape().to_vec(),
        });
    }
    for (i, v) in target.iter().enumerate() {
        if *v != 0.0 && *v != 1.0 {
            return Err(TrainError::NonBinaryTarget { value: *v, index: i });
        }
    }
    Ok(())
}

/// Weighted Dice + BCE loss and its gradient w.r.t. the predictions.
///
/// Dice uses global sums over the whole batch with smoothing [`DICE_EPS`]
/// and the raw probabilities; the cross-entropy clamps probabilities to
/// [`PROB_CLAMP`] and averages over all pixels.
pub fn loss_and_grad(
    pred: &Array4<f64>,
    target: &Array4<f64>,
    weights: (f64, f64),
) -> Result<(f64, Array4<f64>), TrainError> {
    check_shapes(pred, target)?;
    let (w_dice, w_bce) = weights;
    let n = pred.len() as f64;

    let mut sum_pg = 0.0;
    let mut sum_p = 0.0;
    let mut sum_g = 0.0;
    let mut bce = 0.0;
    for (p, g) in pred.iter().zip(target.iter()) {
        sum_pg += p * g;
        sum_p += p;
        sum_g += g;
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        bce -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
    }
    bce /= n;
    let num = 2.0 * sum_pg + DICE_EPS;
    let den = sum_p + sum_g + DICE_EPS;
    let dice = 1.0 - num / den;
    let loss = w_dice * dice + w_bce * bce;

    let mut grad = Array4::zeros(pred.dim());
    let den_sq = den * den;
    for ((p, g), d) in pred.iter().zip(target.iter()).zip(grad.iter_mut()) {
        // d(dice)/dp = −(2g·den − num)/den².
        let d_dice = -(2.0 * g * den - num) / den_sq;
        // d(bce)/dp, zero where the clamp is active.
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let d_bce = if *p > PROB_CLAMP && *p < 1.0 - PROB_CLAMP {
            (-g / pc + (1.0 - g) / (1.0 - pc)) / n
        } else {
            0.0
        };
        *d = w_dice * d_dice + w_bce * d_bce;
    }
    Ok((loss, grad))
}

/// The default training loss: the average of soft Dice and binary
/// cross-entropy.
pub fn combined_loss(pred: &Array4<f64>, target: &Array4<f64>) -> Result<f64, TrainError> {
    Ok(loss_and_grad(pred, target, (0.5, 0.5))?.0)
}

/// Adam optimizer state over a parameter store.
pub struct Adam {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(ps: &ParamStore) -> Self {
        Adam {
            m: ps
                .entries()
                .iter()
                .map(|e| ArrayD::zeros(e.value.raw_dim()))
                .collect(),
            v: ps
                .entries()
                .iter()
                .map(|e| ArrayD::zeros(e.value.raw_dim()))
                .collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of every trainable tensor. `lr = 0` leaves them in place.
    pub fn step(&mut self, ps: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in 0..ps.len() {
            if !ps.entries()[id].trainable {
                continue;
            }
            let g = grads.get(id);
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mv, &gv| {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            });
            let p = ps.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                let m_hat = mv / bc1;
                let v_hat = vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + self.eps);
            });
        }
    }
}

/// One completed epoch: learning rate in effect, mean training loss,
/// validation loss, and validation metrics at threshold 0.5.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_loss: f64,
    pub val: MetricsReport,
}

/// CSV header for persisted epoch records.
pub const TRAIN_CSV_HEADER: &str = "epoch,lr,loss,se,sp,acc,auc,f1,precision";

/// Full outcome of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    /// Checkpoint of the epoch with the highest validation F1 (absent only
    /// for zero-epoch fine-tune no-ops).
    pub best_checkpoint: Option<PathBuf>,
    pub best_epoch: Option<usize>,
    pub best_f1: f64,
}

impl TrainRecord {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(TRAIN_CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.epoch, r.lr, r.loss, r.val.se, r.val.sp, r.val.acc, r.val.auc, r.val.f1,
                r.val.precision
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv_string()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Stack preprocessed samples into model input and target batches.
fn stack_batch(samples: &[&RetinalSample]) -> Result<(Array4<f64>, Array4<f64>), TrainError> {
    let first = samples.first().expect("nonempty batch");
    let (h, w, c) = first.image.dim();
    let mut x = Array4::zeros((samples.len(), c, h, w));
    let mut y = Array4::zeros((samples.len(), 1, h, w));
    for (i, s) in samples.iter().enumerate() {
        let mask = s
            .vessel_mask
            .as_ref()
            .ok_or_else(|| TrainError::Unlabeled { id: s.id.clone() })?;
        for yy in 0..h {
            for xx in 0..w {
                for cc in 0..c {
                    x[[i, cc, yy, xx]] = s.image[[yy, xx, cc]];
                }
                y[[i, 0, yy, xx]] = f64::from(mask[[yy, xx]]);
            }
        }
    }
    Ok((x, y))
}

fn require_labeled(manifest: &DatasetManifest) -> Result<(), TrainError> {
    for s in &manifest.samples {
        if s.vessel_path.is_none() {
            return Err(TrainError::Unlabeled { id: s.id.clone() });
        }
    }
    Ok(())
}

/// Mean eval-mode combined loss over a list of samples.
fn validation_loss(
    net: &SAUNet,
    samples: &[RetinalSample],
    batch_size: usize,
    weights: (f64, f64),
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&RetinalSample> = chunk.iter().collect();
        let (x, y) = stack_batch(&refs)?;
        let prob = net.forward(&x, Mode::Eval)?;
        let (loss, _) = loss_and_grad(&prob, &y, weights)?;
        total += loss * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Train `net` for the configured two phases, reducing the learning rate on
/// validation-loss plateaus and checkpointing the best validation F1 into
/// `out_dir/best.ckpt`.
pub fn train(
    net: &mut SAUNet,
    data: &DatasetManifest,
    cfg: &TrainConfig,
    validation: &DatasetManifest,
    out_dir: &Path,
) -> Result<TrainRecord, TrainError> {
    run_loop(net, data, cfg, validation, out_dir, true)
}

/// Continue optimizing a checkpointed network with identical loop
/// semantics; a zero-epoch configuration is a valid no-op.
pub fn fine_tune(
    net: &mut SAUNet,
    data: &DatasetManifest,
    cfg: &TrainConfig,
    validation: &DatasetManifest,
    out_dir: &Path,
) -> Result<TrainRecord, TrainError> {
    run_loop(net, data, cfg, validation, out_dir, false)
}

fn run_loop(
    net: &mut SAUNet,
    data: &DatasetManifest,
    cfg: &TrainConfig,
    validation: &DatasetManifest,
    out_dir: &Path,
    require_epochs: bool,
) -> Result<TrainRecord, TrainError> {
    cfg.validate(require_epochs)?;
    if cfg.epochs_phase1 + cfg.epochs_phase2 == 0 {
        return Ok(TrainRecord {
            epochs: Vec::new(),
            best_checkpoint: None,
            best_epoch: None,
            best_f1: f64::NEG_INFINITY,
        });
    }
    if data.is_empty() {
        return Err(TrainError::Config {
            message: "training data must not be empty".into(),
        });
    }
    if validation.is_empty() {
        return Err(TrainError::Config {
            message: "validation data must not be empty (plateau scheduling needs it)".into(),
        });
    }
    require_labeled(data)?;
    require_labeled(validation)?;
    std::fs::create_dir_all(out_dir).map_err(|source| TrainError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let best_path = out_dir.join("best.ckpt");

    let val_samples = validation.load_all_preprocessed()?;
    let mut adam = Adam::new(net.params());
    let mut records = Vec::with_capacity(cfg.epochs_phase1 + cfg.epochs_phase2);
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut epoch = 0usize;
    let n = data.len();

    for (phase, (phase_epochs, phase_lr)) in [
        (cfg.epochs_phase1, cfg.lr_phase1),
        (cfg.epochs_phase2, cfg.lr_phase2),
    ]
    .into_iter()
    .enumerate()
    {
        let mut lr = phase_lr;
        let mut best_val_loss = f64::INFINITY;
        let mut wait = 0usize;
        for _ in 0..phase_epochs {
            epoch += 1;
            // Deterministic shuffle, then mini-batches (last may be short).
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = crate::seed::stream_rng(cfg.seed, "shuffle", &[epoch as u64]);
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut seen = 0usize;
            for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let mut samples = Vec::with_capacity(chunk.len());
                for &idx in chunk {
                    let sample = data.load_preprocessed(idx)?;
                    let sample = if cfg.augmentation.enabled {
                        let aug_seed =
                            derive_seed(cfg.seed, "augment", &[epoch as u64, idx as u64]);
                        augment(&sample, &cfg.augmentation, aug_seed)
                    } else {
                        sample
                    };
                    samples.push(sample);
                }
                let refs: Vec<&RetinalSample> = samples.iter().collect();
                let (x, y) = stack_batch(&refs)?;
                let db_seed =
                    derive_seed(cfg.seed, "dropblock", &[epoch as u64, batch_no as u64]);
                let (prob, cache, updates) =
                    net.forward_full(&x, Mode::Train { dropblock_seed: db_seed })?;
                let (loss, d_prob) = loss_and_grad(&prob, &y, cfg.loss_weights)?;
                let grads = net.backward(&cache, &d_prob);
                drop(cache);
                adam.step(net.params_mut(), &grads, lr);
                net.commit_bn(&updates);
                loss_sum += loss * chunk.len() as f64;
                seen += chunk.len();
            }
            let train_loss = loss_sum / seen as f64;

            let val_loss =
                validation_loss(net, &val_samples, cfg.batch_size, cfg.loss_weights)?;
            let val = evaluate_model(net, validation, VALIDATION_THRESHOLD)?;

            if val.f1 > best_f1 {
                best_f1 = val.f1;
                best_epoch = Some(epoch);
                let meta = CheckpointMeta {
                    config: net.config().clone(),
                    epoch,
                    rng_seed: cfg.seed,
                    metrics: [
                        ("f1".to_string(), val.f1),
                        ("auc".to_string(), val.auc),
                        ("val_loss".to_string(), val_loss),
                    ]
                    .into_iter()
                    .collect(),
                };
                net.save_checkpoint(&best_path, &meta)?;
            }
            records.push(EpochRecord {
                epoch,
                lr,
                loss: train_loss,
                val_loss,
                val,
            });
            // Reduce-on-plateau bookkeeping (applies from the next epoch).
            if val_loss < best_val_loss {
                best_val_loss = val_loss;
                wait = 0;
            } else {
                wait += 1;
                if wait >= PLATEAU_PATIENCE {
                    lr *= PLATEAU_FACTOR;
                    wait = 0;
                }
            }
        }
        let _ = phase;
    }

    Ok(TrainRecord {
        epochs: records,
        best_checkpoint: Some(best_path),
        best_epoch,
        best_f1,
    })
}
