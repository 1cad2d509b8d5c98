//! Fréchet distance between Gaussian fits of two image sets in a feature
//! space: ‖μa−μb‖² + Tr(σa + σb − 2(σa·σb)^{1/2}).
//!
//! The matrix square root is taken via symmetric eigendecomposition of
//! σa^{1/2}·σb·σa^{1/2}, which is symmetric PSD whenever the inputs are, so
//! no complex arithmetic is needed. The default feature extractor is a
//! 16×16 grayscale downsample — a desk-scale stand-in, not an Inception
//! embedding; extractors are pluggable through [`feature_stats`].

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::imgproc::resize_bilinear_gray;

/// Eigenvalues below this are treated as exactly zero when taking matrix
/// square roots (covariances of small sets are rank-deficient by nature).
pub const EIGENVALUE_CLAMP: f64 = 1e-10;

/// Eigenvalues below this are a genuine PSD violation, not rounding noise.
pub const PSD_TOLERANCE: f64 = -1e-6;

/// Gaussian fit of an image set in feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mu: Array1<f64>,
    pub sigma: Array2<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Name of the built-in extractor, recorded in FID reports.
pub const RAW_EXTRACTOR_NAME: &str = "raw-gray16x16";

/// Built-in feature extractor: luma, bilinear 16×16 downsample, row-major
/// flatten to 256 dimensions.
pub fn raw_features(image: &Array3<f64>) -> Vec<f64> {
    let (h, w, _) = image.dim();
    let mut gray = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            gray[[y, x]] = 0.299 * image[[y, x, 0]]
                + 0.587 * image[[y, x, 1]]
                + 0.114 * image[[y, x, 2]];
        }
    }
    let small = resize_bilinear_gray(&gray, 16, 16);
    small.iter().copied().collect()
}

/// Sample mean and covariance (denominator n−1) of feature vectors.
pub fn stats_from_features(features: &[Vec<f64>]) -> Result<FeatureStats, MetricsError> {
    let n = features.len();
    if n < 2 {
        return Err(MetricsError::InsufficientSamples(n));
    }
    let d = features[0].len();
    for f in features {
        if f.len() != d {
            return Err(MetricsError::DimensionMismatch(d, f.len()));
        }
    }
    let mat = Array2::from_shape_fn((n, d), |(i, j)| features[i][j]);
    let mu = mat.mean_axis(ndarray::Axis(0)).expect("n >= 2");
    let centered = &mat - &mu;
    let mut sigma = centered.t().dot(&centered) / (n as f64 - 1.0);
    // Symmetrize: blocked GEMM may round the two triangles differently.
    let sigma_t = sigma.t().to_owned();
    sigma = (&sigma + &sigma_t) / 2.0;
    Ok(FeatureStats { mu, sigma, n })
}

/// Fit feature statistics to a set of images under an extractor.
pub fn feature_stats(
    images: &[Array3<f64>],
    extractor: &(dyn Fn(&Array3<f64>) -> Vec<f64> + Sync),
) -> Result<FeatureStats, MetricsError> {
    let features: Vec<Vec<f64>> = images.iter().map(extractor).collect();
    stats_from_features(&features)
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) / 2.0
}

/// Clamped eigenvalues of a symmetric matrix, rejecting genuine negatives.
fn psd_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, MetricsError> {
    let mut eig = SymmetricEigen::new(m);
    for ev in eig.eigenvalues.iter_mut() {
        if *ev < PSD_TOLERANCE {
            return Err(MetricsError::NotPsd {
                eigenvalue: *ev,
                tolerance: PSD_TOLERANCE,
            });
        }
        if *ev < EIGENVALUE_CLAMP {
            *ev = 0.0;
        }
    }
    Ok(eig)
}

/// Principal square root of a symmetric PSD matrix.
fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricsError> {
    let eig = psd_eigen(symmetrized(m))?;
    let sqrt_vals = eig.eigenvalues.map(|v| v.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussian feature fits; nonnegative, zero for
/// identical statistics.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::DimensionMismatch(a.dim(), b.dim()));
    }
    let sigma_a = symmetrized(&to_dmatrix(&a.sigma));
    let sigma_b = symmetrized(&to_dmatrix(&b.sigma));
    let mean_sq: f64 = a
        .mu
        .iter()
        .zip(b.mu.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sqrt_a = sym_sqrt(&sigma_a)?;
    let inner = &sqrt_a * &sigma_b * &sqrt_a;
    let eig = psd_eigen(symmetrized(&inner))?;
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let value = mean_sq + sigma_a.trace() + sigma_b.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Serializable result of a FID computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub value: f64,
    pub extractor: String,
    pub n_a: usize,
    pub n_b: usize,
}

impl FidReport {
    pub fn new(value: f64, extractor: &str, a: &FeatureStats, b: &FeatureStats) -> Self {
        FidReport {
            value,
            extractor: extractor.to_string(),
            n_a: a.n,
            n_b: b.n,
        }
    }
}
