//! Dataset ingestion: DRIVE-format directories, synthetic image directories,
//! preprocessing to training resolution, and geometric/color augmentation.
//!
//! A [`DatasetManifest`] is a lightweight, serializable index of sample file
//! paths; pixel data is loaded on demand into [`RetinalSample`]s. Ordering is
//! lexicographic by filename everywhere so that manifests — and everything
//! seeded from their order — are deterministic.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgproc::{
    self, resize_bilinear, resize_nearest_mask, warp_image, warp_mask, AffineMap, ImageIoError,
};
use crate::seed::stream_rng;

/// Default training resolution, a power of two as the preprocessing step
/// requires.
pub const DEFAULT_TARGET_SIZE: usize = 512;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset layout error: missing {what} under {path}")]
    Layout { what: String, path: PathBuf },
    #[error("dataset layout error: no readable images under {path}")]
    Empty { path: PathBuf },
    #[error("sample {id}: {detail}")]
    Integrity { id: String, detail: String },
    #[error("sample {id} is unlabeled: a vessel mask is required here")]
    Unlabeled { id: String },
    #[error("target size {0} must be a power of two")]
    TargetSize(usize),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("failed to {action} {path}: {source}")]
    Io {
        action: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} failed to parse: {source}")]
    ManifestParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Directory names accepted for this split, in preference order.
    fn dir_candidates(self) -> &'static [&'static str] {
        match self {
            // DRIVE distributions name the train split either "train" or
            // "training" depending on packaging; accept both.
            Split::Train => &["train", "training"],
            Split::Test => &["test"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSource {
    Real,
    Synthetic,
}

/// One loaded sample: image in `[0,1]`, optional vessel ground truth, and a
/// field-of-view mask. All three share the same height and width.
#[derive(Debug, Clone)]
pub struct RetinalSample {
    pub id: String,
    pub image: Array3<f64>,
    pub vessel_mask: Option<Array2<u8>>,
    pub fov_mask: Array2<u8>,
    pub source: SampleSource,
}

impl RetinalSample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }
}

/// File-path record for one sample. `fov_path = None` means an all-ones FOV
/// is synthesized at load time (synthetic images are full-frame).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleRef {
    pub id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vessel_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fov_path: Option<PathBuf>,
    pub source: SampleSource,
}

impl SampleRef {
    /// Load pixel data and validate that image and masks agree on dimensions.
    pub fn load(&self) -> Result<RetinalSample, DatasetError> {
        let image = imgproc::load_rgb(&self.image_path)?;
        let (h, w, _) = image.dim();
        let vessel_mask = match &self.vessel_path {
            Some(p) => Some(imgproc::load_mask(p)?),
            None => None,
        };
        let fov_mask = match &self.fov_path {
            Some(p) => imgproc::load_mask(p)?,
            None => Array2::ones((h, w)),
        };
        if let Some(v) = &vessel_mask {
            if v.dim() != (h, w) {
                return Err(DatasetError::Integrity {
                    id: self.id.clone(),
                    detail: format!(
                        "vessel mask is {:?} but image is {:?}",
                        v.dim(),
                        (h, w)
                    ),
                });
            }
        }
        if fov_mask.dim() != (h, w) {
            return Err(DatasetError::Integrity {
                id: self.id.clone(),
                detail: format!(
                    "fov mask is {:?} but image is {:?}",
                    fov_mask.dim(),
                    (h, w)
                ),
            });
        }
        Ok(RetinalSample {
            id: self.id.clone(),
            image,
            vessel_mask,
            fov_mask,
            source: self.source,
        })
    }
}

/// Ordered index of samples plus the resolution they are preprocessed to.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<SampleRef>,
    pub split: Split,
    pub target_size: usize,
    /// Non-fatal loading problems (e.g. skipped unreadable files).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Free-form provenance (e.g. generator truncation setting).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Replace the target resolution, validating the power-of-two invariant.
    pub fn with_target_size(mut self, target_size: usize) -> Result<Self, DatasetError> {
        validate_target_size(target_size)?;
        self.target_size = target_size;
        Ok(self)
    }

    /// Load one sample at its original resolution.
    pub fn load_sample(&self, idx: usize) -> Result<RetinalSample, DatasetError> {
        self.samples[idx].load()
    }

    /// Load one sample resized to `target_size`.
    pub fn load_preprocessed(&self, idx: usize) -> Result<RetinalSample, DatasetError> {
        preprocess(&self.samples[idx].load()?, self.target_size)
    }

    /// Load every sample resized to `target_size`, in manifest order.
    pub fn load_all_preprocessed(&self) -> Result<Vec<RetinalSample>, DatasetError> {
        (0..self.len()).map(|i| self.load_preprocessed(i)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json + "\n").map_err(|source| DatasetError::Io {
            action: "write manifest",
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            action: "read manifest",
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| DatasetError::ManifestParse {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub fn validate_target_size(target_size: usize) -> Result<(), DatasetError> {
    if target_size == 0 || !target_size.is_power_of_two() {
        return Err(DatasetError::TargetSize(target_size));
    }
    Ok(())
}

const IMAGE_EXTENSIONS: &[&str] = &["tif", "tiff", "png"];
const MASK_EXTENSIONS: &[&str] = &["gif", "png"];

fn has_extension(path: &Path, allowed: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| allowed.iter().any(|a| e.eq_ignore_ascii_case(a)))
        .unwrap_or(false)
}

/// List files with one of `allowed` extensions, sorted by filename.
fn list_files(dir: &Path, allowed: &[&str]) -> Result<Vec<PathBuf>, DatasetError> {
    let entries = std::fs::read_dir(dir).map_err(|source| DatasetError::Io {
        action: "list directory",
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_extension(p, allowed))
        .collect();
    files.sort_by_key(|p| p.file_name().map(|n| n.to_os_string()));
    Ok(files)
}

/// Leading digits of the file stem; DRIVE files pair by this prefix
/// (`21_training.tif` / `21_manual1.gif` / `21_training_mask.gif`).
fn numeric_prefix(path: &Path) -> Option<String> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        None
    } else {
        Some(digits)
    }
}

fn require_dir(base: &Path, what: &str) -> Result<PathBuf, DatasetError> {
    let dir = base.join(what);
    if dir.is_dir() {
        Ok(dir)
    } else {
        Err(DatasetError::Layout {
            what: what.to_string(),
            path: base.to_path_buf(),
        })
    }
}

/// Ingest a DRIVE-format split: `<root>/<split>/{images,1st_manual,mask}`,
/// files paired by shared numeric filename prefix. Every image must have both
/// a vessel annotation and a FOV mask with matching dimensions.
pub fn load_drive_dataset(root: &Path, split: Split) -> Result<DatasetManifest, DatasetError> {
    let split_dir = split
        .dir_candidates()
        .iter()
        .map(|d| root.join(d))
        .find(|d| d.is_dir())
        .ok_or_else(|| DatasetError::Layout {
            what: split.dir_candidates()[0].to_string(),
            path: root.to_path_buf(),
        })?;
    let images_dir = require_dir(&split_dir, "images")?;
    let manual_dir = require_dir(&split_dir, "1st_manual")?;
    let mask_dir = require_dir(&split_dir, "mask")?;

    let images = list_files(&images_dir, IMAGE_EXTENSIONS)?;
    if images.is_empty() {
        return Err(DatasetError::Empty { path: images_dir });
    }
    let by_prefix = |files: Vec<PathBuf>| -> BTreeMap<String, PathBuf> {
        files
            .into_iter()
            .filter_map(|p| numeric_prefix(&p).map(|k| (k, p)))
            .collect()
    };
    let manuals = by_prefix(list_files(&manual_dir, MASK_EXTENSIONS)?);
    let masks = by_prefix(list_files(&mask_dir, MASK_EXTENSIONS)?);

    let mut samples = Vec::with_capacity(images.len());
    for image_path in images {
        let id = numeric_prefix(&image_path).ok_or_else(|| DatasetError::Integrity {
            id: image_path.display().to_string(),
            detail: "image filename has no numeric prefix to pair by".to_string(),
        })?;
        let vessel_path = manuals.get(&id).cloned().ok_or_else(|| DatasetError::Integrity {
            id: id.clone(),
            detail: "no vessel annotation with matching numeric prefix in 1st_manual".to_string(),
        })?;
        let fov_path = masks.get(&id).cloned().ok_or_else(|| DatasetError::Integrity {
            id: id.clone(),
            detail: "no FOV mask with matching numeric prefix in mask".to_string(),
        })?;
        check_dimensions(&id, &image_path, &[&vessel_path, &fov_path])?;
        samples.push(SampleRef {
            id,
            image_path,
            vessel_path: Some(vessel_path),
            fov_path: Some(fov_path),
            source: SampleSource::Real,
        });
    }
    Ok(DatasetManifest {
        samples,
        split,
        target_size: DEFAULT_TARGET_SIZE,
        warnings: Vec::new(),
        metadata: BTreeMap::new(),
    })
}

fn check_dimensions(id: &str, image: &Path, masks: &[&Path]) -> Result<(), DatasetError> {
    let img_dim = imgproc::image_dimensions(image)?;
    for mask in masks {
        let mask_dim = imgproc::image_dimensions(mask)?;
        if mask_dim != img_dim {
            return Err(DatasetError::Integrity {
                id: id.to_string(),
                detail: format!(
                    "mask {} is {}x{} but image is {}x{}",
                    mask.display(),
                    mask_dim.0,
                    mask_dim.1,
                    img_dim.0,
                    img_dim.1
                ),
            });
        }
    }
    Ok(())
}

/// Ingest a flat directory of synthetic PNGs. Labels are looked up under
/// `<dir>/labels/<same-name>.png`, FOV masks under `<dir>/fov/<same-name>.png`
/// (all-ones FOV when absent). Unreadable images are skipped with a warning.
pub fn load_synthetic_images(dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let files = list_files(dir, &["png"])?;
    let labels_dir = dir.join("labels");
    let fov_dir = dir.join("fov");
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for path in files {
        // Full decode up front so corrupt files surface here as warnings
        // rather than as hard errors mid-pipeline.
        if let Err(err) = image::open(&path) {
            warnings.push(format!("skipped unreadable image {}: {err}", path.display()));
            continue;
        }
        let name = path.file_name().expect("listed files have names");
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let vessel_path = Some(labels_dir.join(name)).filter(|p| p.is_file());
        let fov_path = Some(fov_dir.join(name)).filter(|p| p.is_file());
        samples.push(SampleRef {
            id,
            image_path: path,
            vessel_path,
            fov_path,
            source: SampleSource::Synthetic,
        });
    }
    if samples.is_empty() {
        return Err(DatasetError::Empty {
            path: dir.to_path_buf(),
        });
    }
    Ok(DatasetManifest {
        samples,
        split: Split::Train,
        target_size: DEFAULT_TARGET_SIZE,
        warnings,
        metadata: BTreeMap::new(),
    })
}

/// Resize a sample to `target_size`×`target_size`: bilinear for the image,
/// nearest-neighbor (then re-binarize) for the masks so they stay in {0,1}.
pub fn preprocess(sample: &RetinalSample, target_size: usize) -> Result<RetinalSample, DatasetError> {
    validate_target_size(target_size)?;
    Ok(RetinalSample {
        id: sample.id.clone(),
        image: resize_bilinear(&sample.image, target_size, target_size),
        vessel_mask: sample
            .vessel_mask
            .as_ref()
            .map(|m| resize_nearest_mask(m, target_size, target_size)),
        fov_mask: resize_nearest_mask(&sample.fov_mask, target_size, target_size),
        source: sample.source,
    })
}

/// Inclusive range, `lo ≤ hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn fixed(v: f64) -> Self {
        Range { lo: v, hi: v }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        rng.random_range(self.lo..=self.hi)
    }
}

/// Augmentation policy. When `enabled` is false, [`augment`] is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    pub enabled: bool,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    /// Rotation about the image center, degrees.
    pub rotation_degrees: Range,
    /// Additive brightness offset.
    pub brightness: Range,
    /// Multiplicative contrast about mid-gray 0.5.
    pub contrast: Range,
    /// Isotropic scale factor.
    pub scale: Range,
    /// Translation in pixels, drawn independently for x and y.
    pub translate: Range,
}

impl Default for AugmentationSpec {
    /// Enabled policy with the default magnitudes: flips at p=0.5, rotation
    /// ±15°, brightness ±0.2, contrast 0.8–1.2, scale 0.9–1.1, no translation.
    fn default() -> Self {
        AugmentationSpec {
            enabled: true,
            horizontal_flip: true,
            vertical_flip: true,
            rotation_degrees: Range { lo: -15.0, hi: 15.0 },
            brightness: Range { lo: -0.2, hi: 0.2 },
            contrast: Range { lo: 0.8, hi: 1.2 },
            scale: Range { lo: 0.9, hi: 1.1 },
            translate: Range::fixed(0.0),
        }
    }
}

impl AugmentationSpec {
    pub fn disabled() -> Self {
        AugmentationSpec {
            enabled: false,
            ..AugmentationSpec::default()
        }
    }
}

/// Apply one random augmentation draw. The same geometric transform moves the
/// image (bilinear) and both masks (nearest-neighbor); color jitter touches
/// the image only. Deterministic in (`sample`, `spec`, `rng_seed`).
pub fn augment(sample: &RetinalSample, spec: &AugmentationSpec, rng_seed: u64) -> RetinalSample {
    if !spec.enabled {
        return sample.clone();
    }
    let mut rng = stream_rng(rng_seed, "augment", &[]);
    // Fixed draw order, independent of which knobs are active, so the random
    // stream is stable under spec changes.
    let flip_h = rng.random_bool(0.5) && spec.horizontal_flip;
    let flip_v = rng.random_bool(0.5) && spec.vertical_flip;
    let theta = spec.rotation_degrees.sample(&mut rng).to_radians();
    let scale = spec.scale.sample(&mut rng);
    let tx = spec.translate.sample(&mut rng);
    let ty = spec.translate.sample(&mut rng);
    let brightness = spec.brightness.sample(&mut rng);
    let contrast = spec.contrast.sample(&mut rng);

    let map = AffineMap {
        theta,
        scale,
        flip_h,
        flip_v,
        translate: (tx, ty),
    };
    let mut image = warp_image(&sample.image, &map);
    for v in image.iter_mut() {
        *v = ((*v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
    }
    RetinalSample {
        id: sample.id.clone(),
        image,
        vessel_mask: sample.vessel_mask.as_ref().map(|m| warp_mask(m, &map)),
        fov_mask: warp_mask(&sample.fov_mask, &map),
        source: sample.source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgproc::{save_mask, save_rgb8};
    use ndarray::Array2;
    use tempfile::TempDir;

    fn flat_image(h: usize, w: usize, v: f64) -> Array3<f64> {
        Array3::from_elem((h, w, 3), v)
    }

    /// Build a DRIVE-format tree with `n` well-formed triples of size
    /// `w`×`h`, ids "01".."0n".
    fn drive_fixture(n: usize, w: usize, h: usize) -> TempDir {
        let dir = tempfile::tempdir().unwrap();
        let split = dir.path().join("train");
        for sub in ["images", "1st_manual", "mask"] {
            std::fs::create_dir_all(split.join(sub)).unwrap();
        }
        for i in 1..=n {
            let img = flat_image(h, w, 0.25 + i as f64 / 100.0);
            save_rgb8(&split.join(format!("images/{i:02}_training.png")), &img).unwrap();
            let mut vessel = Array2::<u8>::zeros((h, w));
            vessel[[h / 2, w / 2]] = 1;
            save_mask(&split.join(format!("1st_manual/{i:02}_manual1.png")), &vessel).unwrap();
            let fov = Array2::<u8>::ones((h, w));
            save_mask(&split.join(format!("mask/{i:02}_training_mask.png")), &fov).unwrap();
        }
        dir
    }

    #[test]
    fn drive_loader_pairs_and_orders_samples() {
        let dir = drive_fixture(3, 12, 10);
        let m = load_drive_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(
            m.samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(),
            ["01", "02", "03"]
        );
        let s = m.load_sample(1).unwrap();
        assert_eq!(s.image.dim(), (10, 12, 3));
        assert!(s.vessel_mask.is_some());
        assert_eq!(s.source, SampleSource::Real);
    }

    #[test]
    fn drive_loader_missing_manual_dir_is_layout_error() {
        let dir = drive_fixture(1, 8, 8);
        std::fs::remove_dir_all(dir.path().join("train/1st_manual")).unwrap();
        let err = load_drive_dataset(dir.path(), Split::Train).unwrap_err();
        assert!(
            matches!(&err, DatasetError::Layout { what, .. } if what == "1st_manual"),
            "expected layout error naming 1st_manual, got {err}"
        );
    }

    #[test]
    fn drive_loader_empty_images_dir_is_layout_error() {
        let dir = drive_fixture(1, 8, 8);
        std::fs::remove_file(dir.path().join("train/images/01_training.png")).unwrap();
        let err = load_drive_dataset(dir.path(), Split::Train).unwrap_err();
        assert!(matches!(err, DatasetError::Empty { .. }), "got {err}");
    }

    #[test]
    fn drive_loader_accepts_training_directory_name() {
        let dir = drive_fixture(1, 8, 8);
        std::fs::rename(dir.path().join("train"), dir.path().join("training")).unwrap();
        let m = load_drive_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn drive_loader_names_sample_on_dimension_mismatch() {
        let dir = drive_fixture(2, 8, 8);
        // Shrink sample 02's vessel annotation.
        let bad = Array2::<u8>::ones((4, 4));
        save_mask(
            &dir.path().join("train/1st_manual/02_manual1.png"),
            &bad,
        )
        .unwrap();
        let err = load_drive_dataset(dir.path(), Split::Train).unwrap_err();
        assert!(
            matches!(&err, DatasetError::Integrity { id, .. } if id == "02"),
            "expected integrity error naming 02, got {err}"
        );
    }

    #[test]
    fn synthetic_loader_skips_corrupt_files_with_warnings() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            save_rgb8(
                &dir.path().join(format!("synth_{i:03}.png")),
                &flat_image(6, 6, 0.4),
            )
            .unwrap();
        }
        std::fs::write(dir.path().join("bad_a.png"), b"not a png").unwrap();
        std::fs::write(dir.path().join("bad_b.png"), b"\x89PNG\r\n\x1a\n junk").unwrap();
        let m = load_synthetic_images(dir.path()).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.warnings.len(), 2);
        assert!(m.samples.iter().all(|s| s.source == SampleSource::Synthetic));
        assert!(m.samples.iter().all(|s| s.vessel_path.is_none()));
    }

    #[test]
    fn synthetic_loader_defaults_fov_to_all_ones() {
        let dir = tempfile::tempdir().unwrap();
        save_rgb8(&dir.path().join("one.png"), &flat_image(5, 7, 0.3)).unwrap();
        let m = load_synthetic_images(dir.path()).unwrap();
        let s = m.load_sample(0).unwrap();
        assert_eq!(s.fov_mask, Array2::<u8>::ones((5, 7)));
        assert!(s.vessel_mask.is_none());
    }

    #[test]
    fn synthetic_loader_empty_dir_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_synthetic_images(dir.path()),
            Err(DatasetError::Empty { .. })
        ));
    }

    #[test]
    fn synthetic_loader_picks_up_labels_subdir() {
        let dir = tempfile::tempdir().unwrap();
        save_rgb8(&dir.path().join("a.png"), &flat_image(4, 4, 0.2)).unwrap();
        std::fs::create_dir(dir.path().join("labels")).unwrap();
        let mask = Array2::<u8>::ones((4, 4));
        save_mask(&dir.path().join("labels/a.png"), &mask).unwrap();
        let m = load_synthetic_images(dir.path()).unwrap();
        assert!(m.samples[0].vessel_path.is_some());
        assert_eq!(m.load_sample(0).unwrap().vessel_mask, Some(mask));
    }

    #[test]
    fn preprocess_resizes_drive_shape_to_square() {
        let sample = RetinalSample {
            id: "x".into(),
            image: flat_image(584, 565, 0.5),
            vessel_mask: Some(Array2::zeros((584, 565))),
            fov_mask: Array2::ones((584, 565)),
            source: SampleSource::Real,
        };
        let out = preprocess(&sample, 64).unwrap();
        assert_eq!(out.image.dim(), (64, 64, 3));
        assert_eq!(out.fov_mask.dim(), (64, 64));
        assert_eq!(out.vessel_mask.as_ref().unwrap().dim(), (64, 64));
    }

    #[test]
    fn preprocess_same_size_keeps_masks_bitwise() {
        let mut mask = Array2::<u8>::zeros((16, 16));
        mask[[3, 5]] = 1;
        mask[[9, 2]] = 1;
        let sample = RetinalSample {
            id: "x".into(),
            image: flat_image(16, 16, 0.1),
            vessel_mask: Some(mask.clone()),
            fov_mask: mask.clone(),
            source: SampleSource::Real,
        };
        let out = preprocess(&sample, 16).unwrap();
        assert_eq!(out.vessel_mask.unwrap(), mask);
        assert_eq!(out.fov_mask, mask);
    }

    #[test]
    fn preprocess_rejects_non_power_of_two() {
        let sample = RetinalSample {
            id: "x".into(),
            image: flat_image(8, 8, 0.1),
            vessel_mask: None,
            fov_mask: Array2::ones((8, 8)),
            source: SampleSource::Synthetic,
        };
        assert!(matches!(
            preprocess(&sample, 500),
            Err(DatasetError::TargetSize(500))
        ));
    }

    #[test]
    fn preprocess_is_idempotent_for_masks() {
        let mask = Array2::from_shape_fn((13, 11), |(y, x)| u8::from((y * x) % 3 == 0));
        let sample = RetinalSample {
            id: "x".into(),
            image: flat_image(13, 11, 0.1),
            vessel_mask: Some(mask),
            fov_mask: Array2::ones((13, 11)),
            source: SampleSource::Real,
        };
        let once = preprocess(&sample, 8).unwrap();
        let twice = preprocess(&once, 8).unwrap();
        assert_eq!(once.vessel_mask, twice.vessel_mask);
        assert_eq!(once.fov_mask, twice.fov_mask);
    }

    fn delta_sample(n: usize, y: usize, x: usize) -> RetinalSample {
        let mut image = Array3::zeros((n, n, 3));
        image[[y, x, 0]] = 1.0;
        image[[y, x, 1]] = 1.0;
        image[[y, x, 2]] = 1.0;
        let mut mask = Array2::<u8>::zeros((n, n));
        mask[[y, x]] = 1;
        RetinalSample {
            id: "delta".into(),
            image,
            vessel_mask: Some(mask.clone()),
            fov_mask: mask,
            source: SampleSource::Real,
        }
    }

    #[test]
    fn disabled_spec_is_identity() {
        let sample = delta_sample(9, 2, 3);
        let out = augment(&sample, &AugmentationSpec::disabled(), 7);
        assert_eq!(out.image, sample.image);
        assert_eq!(out.vessel_mask, sample.vessel_mask);
        assert_eq!(out.fov_mask, sample.fov_mask);
    }

    #[test]
    fn flipping_twice_restores_input() {
        let spec = AugmentationSpec {
            enabled: true,
            horizontal_flip: true,
            vertical_flip: false,
            rotation_degrees: Range::fixed(0.0),
            brightness: Range::fixed(0.0),
            contrast: Range::fixed(1.0),
            scale: Range::fixed(1.0),
            translate: Range::fixed(0.0),
        };
        let sample = delta_sample(8, 2, 1);
        // The flip is a coin toss; probe seeds until it lands heads, then the
        // same seed applied twice must restore the original.
        let seed = (0..64)
            .find(|&s| augment(&sample, &spec, s).image != sample.image)
            .expect("some seed flips");
        let once = augment(&sample, &spec, seed);
        assert_eq!(once.image[[2, 6, 0]], 1.0, "hflip moves col 1 to col 6");
        let twice = augment(&once, &spec, seed);
        for (a, b) in twice.image.iter().zip(sample.image.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(twice.vessel_mask, sample.vessel_mask);
    }

    #[test]
    fn rotation_matches_hand_computed_position() {
        let spec = AugmentationSpec {
            enabled: true,
            horizontal_flip: false,
            vertical_flip: false,
            rotation_degrees: Range::fixed(90.0),
            brightness: Range::fixed(0.0),
            contrast: Range::fixed(1.0),
            scale: Range::fixed(1.0),
            translate: Range::fixed(0.0),
        };
        // 5x5 frame, center (2,2): a 90° counterclockwise rotation carries
        // the mask pixel at (row 1, col 2) to (row 2, col 3).
        let sample = delta_sample(5, 1, 2);
        let out = augment(&sample, &spec, 0);
        let mask = out.vessel_mask.unwrap();
        assert_eq!(mask[[2, 3]], 1, "rotated pixel lands at hand-computed spot");
        assert_eq!(mask.sum(), 1);
    }

    #[test]
    fn image_and_mask_undergo_same_geometry() {
        let sample = delta_sample(9, 2, 3);
        let spec = AugmentationSpec {
            enabled: true,
            horizontal_flip: false,
            vertical_flip: false,
            rotation_degrees: Range::fixed(30.0),
            brightness: Range::fixed(0.0),
            contrast: Range::fixed(1.0),
            scale: Range::fixed(1.0),
            translate: Range::fixed(0.0),
        };
        let out = augment(&sample, &spec, 11);
        let mask = out.vessel_mask.unwrap();
        assert!(mask.sum() >= 1, "delta mask survives a small rotation");
        // The brightest warped image pixel must lie where the warped mask is
        // set: both moved through the same affine map.
        let mut best = (0, 0);
        let mut best_v = f64::MIN;
        for y in 0..9 {
            for x in 0..9 {
                if out.image[[y, x, 0]] > best_v {
                    best_v = out.image[[y, x, 0]];
                    best = (y, x);
                }
            }
        }
        assert_eq!(
            mask[[best.0, best.1]],
            1,
            "image argmax {best:?} should be inside the warped mask"
        );
    }

    #[test]
    fn augment_is_deterministic_in_seed() {
        let sample = delta_sample(9, 4, 4);
        let spec = AugmentationSpec::default();
        let a = augment(&sample, &spec, 99);
        let b = augment(&sample, &spec, 99);
        assert_eq!(a.image, b.image);
        assert_eq!(a.vessel_mask, b.vessel_mask);
        let c = augment(&sample, &spec, 100);
        assert!(
            c.image != a.image || c.vessel_mask != a.vessel_mask,
            "different seeds should produce different draws"
        );
    }

    #[test]
    fn color_jitter_leaves_masks_untouched() {
        let sample = delta_sample(8, 3, 3);
        let spec = AugmentationSpec {
            enabled: true,
            horizontal_flip: false,
            vertical_flip: false,
            rotation_degrees: Range::fixed(0.0),
            brightness: Range { lo: 0.1, hi: 0.1 },
            contrast: Range::fixed(1.0),
            scale: Range::fixed(1.0),
            translate: Range::fixed(0.0),
        };
        let out = augment(&sample, &spec, 3);
        assert_eq!(out.vessel_mask, sample.vessel_mask);
        assert!((out.image[[0, 0, 0]] - 0.1).abs() < 1e-12, "background brightened");
    }

    #[test]
    fn manifest_roundtrips_through_json() {
        let dir = drive_fixture(2, 8, 8);
        let m = load_drive_dataset(dir.path(), Split::Train)
            .unwrap()
            .with_target_size(64)
            .unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn with_target_size_validates_power_of_two() {
        let dir = drive_fixture(1, 8, 8);
        let m = load_drive_dataset(dir.path(), Split::Train).unwrap();
        assert!(matches!(
            m.with_target_size(48),
            Err(DatasetError::TargetSize(48))
        ));
    }
}
