//! Pixel-level evaluation: confusion counts inside the field of view, the
//! derived scalar metrics (SE/SP/ACC/PR/F1), exact Mann–Whitney ROC AUC, and
//! pooled (micro-averaged) model evaluation with Table-style reports.
//!
//! Conventions, fixed once here and used everywhere:
//! - vessels are the positive class;
//! - binarization uses `probability ≥ threshold` (ties count as positive);
//! - metrics pool pixel counts over the whole test set before dividing
//!   (micro-averaging), restricted to the FOV mask unless asked otherwise.

mod fid;

pub use fid::{feature_stats, fid, raw_features, stats_from_features, FeatureStats, FidReport,
              RAW_EXTRACTOR_NAME};

use std::path::Path;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetManifest;
use crate::workers;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {what} is {got:?}, expected {expected:?}")]
    ShapeMismatch {
        what: &'static str,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("non-binary {what} value {value} at ({row}, {col})")]
    NonBinary {
        what: &'static str,
        value: u8,
        row: usize,
        col: usize,
    },
    #[error("probability {value} at ({row}, {col}) is outside [0, 1]")]
    ProbabilityRange { value: f64, row: usize, col: usize },
    #[error("empty FOV: no pixels were evaluated")]
    EmptyFov,
    #[error("{metric} is undefined: {reason}")]
    Undefined { metric: &'static str, reason: String },
    #[error(
        "AUC is undefined: need both classes in the FOV, got {positives} positive and {negatives} negative pixels"
    )]
    UndefinedAuc { positives: usize, negatives: usize },
    #[error("feature statistics need at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("covariance is not positive semidefinite: eigenvalue {eigenvalue:e} is below tolerance {tolerance:e}")]
    NotPsd { eigenvalue: f64, tolerance: f64 },
    #[error("sample {id}: {message}")]
    Data { id: String, message: String },
    #[error("prediction failed for sample {id}: {message}")]
    Prediction { id: String, message: String },
    #[error("failed to write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Pixel confusion counts inside the FOV. Vessels are positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    #[serde(rename = "tp")]
    pub true_pos: u64,
    #[serde(rename = "fp")]
    pub false_pos: u64,
    #[serde(rename = "fn")]
    pub false_neg: u64,
    #[serde(rename = "tn")]
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    /// Ground-truth positives in the FOV.
    pub fn positives(&self) -> u64 {
        self.true_pos + self.false_neg
    }

    /// Ground-truth negatives in the FOV.
    pub fn negatives(&self) -> u64 {
        self.true_neg + self.false_pos
    }

    /// Pool counts from another image (micro-averaging).
    pub fn accumulate(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }
}

fn ensure_binary(
    arr: &Array2<u8>,
    what: &'static str,
) -> Result<(), MetricsError> {
    for ((row, col), &v) in arr.indexed_iter() {
        if v > 1 {
            return Err(MetricsError::NonBinary { what, value: v, row, col });
        }
    }
    Ok(())
}

fn ensure_same_shape(
    what: &'static str,
    got: (usize, usize),
    expected: (usize, usize),
) -> Result<(), MetricsError> {
    if got != expected {
        return Err(MetricsError::ShapeMismatch { what, got, expected });
    }
    Ok(())
}

/// Count TP/FP/FN/TN over pixels where `fov_mask` is 1.
pub fn confusion(
    pred_binary: &Array2<u8>,
    gt_binary: &Array2<u8>,
    fov_mask: &Array2<u8>,
) -> Result<ConfusionCounts, MetricsError> {
    ensure_same_shape("prediction", pred_binary.dim(), gt_binary.dim())?;
    ensure_same_shape("fov mask", fov_mask.dim(), gt_binary.dim())?;
    ensure_binary(pred_binary, "prediction")?;
    ensure_binary(gt_binary, "ground truth")?;
    ensure_binary(fov_mask, "fov mask")?;
    let mut c = ConfusionCounts::default();
    for ((p, g), f) in pred_binary.iter().zip(gt_binary.iter()).zip(fov_mask.iter()) {
        if *f == 0 {
            continue;
        }
        match (*p, *g) {
            (1, 1) => c.true_pos += 1,
            (1, 0) => c.false_pos += 1,
            (0, 1) => c.false_neg += 1,
            (0, 0) => c.true_neg += 1,
            _ => unreachable!("inputs validated binary"),
        }
    }
    Ok(c)
}

/// The scalar metrics derivable from counts alone (AUC needs scores).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarMetrics {
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
    pub precision: f64,
    pub f1: f64,
}

/// SE = TP/(TP+FN), SP = TN/(TN+FP), ACC = (TP+TN)/total, PR = TP/(TP+FP),
/// F1 = 2TP/(2TP+FP+FN).
///
/// F1 is computed in the counts form, which is algebraically identical to
/// 2·PR·SE/(PR+SE) but exact in floating point: whenever PR = SE the result
/// equals them bitwise. Zero-denominator policy: no ground-truth positives
/// (or negatives) makes SE (or SP) undefined and is an error; a predictor
/// that marks nothing positive gets PR = 0 and F1 = 0 by convention.
pub fn scalar_metrics(c: ConfusionCounts) -> Result<ScalarMetrics, MetricsError> {
    if c.total() == 0 {
        return Err(MetricsError::EmptyFov);
    }
    if c.positives() == 0 {
        return Err(MetricsError::Undefined {
            metric: "sensitivity",
            reason: "no ground-truth positive pixels in the FOV".to_string(),
        });
    }
    if c.negatives() == 0 {
        return Err(MetricsError::Undefined {
            metric: "specificity",
            reason: "no ground-truth negative pixels in the FOV".to_string(),
        });
    }
    let tp = c.true_pos as f64;
    let fp = c.false_pos as f64;
    let fneg = c.false_neg as f64;
    let tn = c.true_neg as f64;
    let se = tp / (tp + fneg);
    let sp = tn / (tn + fp);
    let acc = (tp + tn) / c.total() as f64;
    let precision = if c.true_pos + c.false_pos == 0 {
        0.0
    } else {
        tp / (tp + fp)
    };
    let f1 = if 2 * c.true_pos + c.false_pos + c.false_neg == 0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fneg)
    };
    Ok(ScalarMetrics { se, sp, acc, precision, f1 })
}

/// Validate and collect `(score, is_positive)` pairs inside the FOV.
fn scored_pairs(
    pred_prob: &Array2<f64>,
    gt_binary: &Array2<u8>,
    fov_mask: &Array2<u8>,
) -> Result<Vec<(f64, bool)>, MetricsError> {
    ensure_same_shape("prediction", pred_prob.dim(), gt_binary.dim())?;
    ensure_same_shape("fov mask", fov_mask.dim(), gt_binary.dim())?;
    ensure_binary(gt_binary, "ground truth")?;
    ensure_binary(fov_mask, "fov mask")?;
    let mut pairs = Vec::new();
    for ((row, col), &p) in pred_prob.indexed_iter() {
        if fov_mask[[row, col]] == 0 {
            continue;
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(MetricsError::ProbabilityRange { value: p, row, col });
        }
        pairs.push((p, gt_binary[[row, col]] == 1));
    }
    Ok(pairs)
}

/// Exact Mann–Whitney AUC from scored pairs, ties counted one half, via
/// average ranks after an O(n log n) sort.
fn auc_from_scored(pairs: &mut [(f64, bool)]) -> Result<f64, MetricsError> {
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::UndefinedAuc {
            positives: n_pos,
            negatives: n_neg,
        });
    }
    pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share the average rank (i + 1 + j) / 2.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_run = pairs[i..j].iter().filter(|p| p.1).count();
        rank_sum_pos += avg_rank * pos_in_run as f64;
        i = j;
    }
    let np = n_pos as f64;
    let auc = (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64);
    Ok(auc.clamp(0.0, 1.0))
}

/// Probability a uniformly random positive FOV pixel outscores a random
/// negative one (ties count one half). Exact, not a threshold grid.
pub fn roc_auc(
    pred_prob: &Array2<f64>,
    gt_binary: &Array2<u8>,
    fov_mask: &Array2<u8>,
) -> Result<f64, MetricsError> {
    let mut pairs = scored_pairs(pred_prob, gt_binary, fov_mask)?;
    auc_from_scored(&mut pairs)
}

/// Binarize a probability map; ties at the threshold count as positive.
pub fn binarize(prob: &Array2<f64>, threshold: f64) -> Array2<u8> {
    prob.mapv(|p| u8::from(p >= threshold))
}

/// Full evaluation result in the comparison-table schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
    pub auc: f64,
    pub f1: f64,
    pub precision: f64,
    pub counts: ConfusionCounts,
    pub n_images: usize,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn from_parts(
        counts: ConfusionCounts,
        auc: f64,
        n_images: usize,
        threshold: f64,
    ) -> Result<Self, MetricsError> {
        let s = scalar_metrics(counts)?;
        Ok(MetricsReport {
            se: s.se,
            sp: s.sp,
            acc: s.acc,
            auc,
            f1: s.f1,
            precision: s.precision,
            counts,
            n_images,
            threshold,
        })
    }
}

/// Anything that maps an `(H, W, 3)` image in `[0,1]` to an `(H, W)`
/// vessel-probability map: a single network or an ensemble.
pub trait Predictor: Sync {
    fn predict(&self, image: &Array3<f64>) -> Result<Array2<f64>, PredictorError>;
}

pub type PredictorError = Box<dyn std::error::Error + Send + Sync + 'static>;

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub threshold: f64,
    /// Restrict to the FOV mask (the standard for DRIVE). When false, every
    /// pixel of the frame is evaluated.
    pub fov_only: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { threshold: 0.5, fov_only: true }
    }
}

/// Evaluate a predictor on a labeled test manifest: per-image inference (in
/// parallel), confusion counts pooled over all images, AUC over the pooled
/// pixels. Results are independent of worker count.
pub fn evaluate_model(
    predictor: &dyn Predictor,
    test: &DatasetManifest,
    threshold: f64,
) -> Result<MetricsReport, MetricsError> {
    evaluate_model_opts(predictor, test, EvalOptions { threshold, fov_only: true })
}

pub fn evaluate_model_opts(
    predictor: &dyn Predictor,
    test: &DatasetManifest,
    opts: EvalOptions,
) -> Result<MetricsReport, MetricsError> {
    if test.is_empty() {
        return Err(MetricsError::EmptyFov);
    }
    let pool = workers::pool();
    let per_image: Vec<Result<(ConfusionCounts, Vec<(f64, bool)>), MetricsError>> =
        pool.install(|| {
            (0..test.len())
                .into_par_iter()
                .map(|i| evaluate_one(predictor, test, i, opts))
                .collect()
        });
    let mut counts = ConfusionCounts::default();
    let mut pairs = Vec::new();
    for result in per_image {
        let (c, mut p) = result?;
        counts.accumulate(&c);
        pairs.append(&mut p);
    }
    let auc = auc_from_scored(&mut pairs)?;
    MetricsReport::from_parts(counts, auc, test.len(), opts.threshold)
}

fn evaluate_one(
    predictor: &dyn Predictor,
    test: &DatasetManifest,
    idx: usize,
    opts: EvalOptions,
) -> Result<(ConfusionCounts, Vec<(f64, bool)>), MetricsError> {
    let id = test.samples[idx].id.clone();
    let sample = test
        .load_preprocessed(idx)
        .map_err(|e| MetricsError::Data { id: id.clone(), message: e.to_string() })?;
    let gt = sample.vessel_mask.as_ref().ok_or_else(|| MetricsError::Data {
        id: id.clone(),
        message: "test sample has no vessel ground truth".to_string(),
    })?;
    let prob = predictor
        .predict(&sample.image)
        .map_err(|e| MetricsError::Prediction { id: id.clone(), message: e.to_string() })?;
    let fov = if opts.fov_only {
        sample.fov_mask.clone()
    } else {
        Array2::ones(sample.fov_mask.dim())
    };
    let pred_bin = binarize(&prob, opts.threshold);
    let counts = confusion(&pred_bin, gt, &fov)?;
    let pairs = scored_pairs(&prob, gt, &fov)?;
    Ok((counts, pairs))
}

pub const REPORT_CSV_HEADER: &str = "method,se,sp,acc,auc,f1,precision";

/// Render named reports as CSV in the comparison-table column order. Floats
/// use Rust's shortest round-trip formatting, so equal values always render
/// to equal bytes.
pub fn report_csv_string(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for (method, r) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            method, r.se, r.sp, r.acc, r.auc, r.f1, r.precision
        ));
    }
    out
}

pub fn write_report_csv(
    path: &Path,
    rows: &[(String, MetricsReport)],
) -> Result<(), MetricsError> {
    std::fs::write(path, report_csv_string(rows)).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn report_json_string(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn write_report_json(path: &Path, report: &MetricsReport) -> Result<(), MetricsError> {
    std::fs::write(path, report_json_string(report)).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}
