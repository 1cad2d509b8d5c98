//! Procedural retina-like images: a desk-scale stand-in for an external
//! image generator.
//!
//! Each image is a dark circular field on a black background filled with an
//! orange radial gradient plus pixel noise, overlaid with a handful of
//! branching random-walk vessel trees. The generator writes three files per
//! sample: the RGB image at the directory root, the circular field mask
//! under `fov/`, and the true vessel tree under `reference/`. The reference
//! mask is deliberately *not* wired into the manifest as a label — the
//! images enter the pipeline unlabeled, and the reference exists only so
//! tests can compare pseudo-labels against a known answer.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::dataset::{DatasetManifest, SampleRef, SampleSource, Split};
use crate::imgproc::{save_mask, save_rgb8};
use crate::pipeline::PipelineError;
use crate::seed::stream_rng;

/// FOV disk radius as a fraction of the image side.
const FIELD_RADIUS_FRACTION: f64 = 0.46;

/// Generate `count` procedural fundus-like images of side `size` under
/// `dir`, returning an unlabeled manifest. Deterministic given `seed`.
pub fn toy_generate(
    dir: &Path,
    count: usize,
    seed: u64,
    size: usize,
) -> Result<DatasetManifest, PipelineError> {
    if count == 0 {
        return Err(PipelineError::Config {
            message: "toy generator needs count >= 1".into(),
        });
    }
    crate::dataset::validate_target_size(size)?;
    let fov_dir = dir.join("fov");
    let ref_dir = dir.join("reference");
    for d in [dir, &fov_dir, &ref_dir] {
        std::fs::create_dir_all(d).map_err(|source| PipelineError::Io {
            path: d.to_path_buf(),
            source,
        })?;
    }

    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("synth{i:04}");
        let (image, fov, vessels) = render(size, seed, i as u64);
        let image_path = dir.join(format!("{id}.png"));
        let fov_path = fov_dir.join(format!("{id}.png"));
        save_rgb8(&image_path, &image)?;
        save_mask(&fov_path, &fov)?;
        save_mask(&ref_dir.join(format!("{id}.png")), &vessels)?;
        samples.push(SampleRef {
            id,
            image_path,
            vessel_path: None,
            fov_path: Some(fov_path),
            source: SampleSource::Synthetic,
        });
    }

    let mut metadata = BTreeMap::new();
    metadata.insert("generator".to_string(), "toy_procedural".to_string());
    metadata.insert("generator_seed".to_string(), seed.to_string());
    Ok(DatasetManifest {
        samples,
        split: Split::Train,
        target_size: size,
        warnings: Vec::new(),
        metadata,
    })
}

/// Render one image: (RGB in [0,1], field mask, vessel mask).
fn render(size: usize, seed: u64, index: u64) -> (Array3<f64>, Array2<u8>, Array2<u8>) {
    let mut rng = stream_rng(seed, "toygen", &[index]);
    let s = size as f64;
    let center = (s - 1.0) / 2.0;
    let radius = FIELD_RADIUS_FRACTION * s;

    let mut fov = Array2::zeros((size, size));
    let mut image = Array3::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - center;
            let dx = x as f64 - center;
            let r = (dy * dy + dx * dx).sqrt();
            if r > radius {
                continue;
            }
            fov[[y, x]] = 1u8;
            // Orange fundus, brighter toward the center, with pixel noise.
            let falloff = 1.0 - 0.45 * (r / radius).powi(2);
            let noise = rng.random_range(-0.03..0.03);
            let base = [0.82, 0.44, 0.18];
            for (c, b) in base.iter().enumerate() {
                image[[y, x, c]] = (b * falloff + noise).clamp(0.0, 1.0);
            }
        }
    }

    // Branching random-walk vessel trees, clipped to the field.
    let mut vessels = Array2::zeros((size, size));
    let n_trees = rng.random_range(3..=5usize);
    // Walker: position, heading, remaining steps, remaining branch budget.
    let mut walkers: Vec<(f64, f64, f64, usize, usize)> = Vec::new();
    for _ in 0..n_trees {
        let start_r = rng.random_range(0.0..0.5 * radius);
        let start_a = rng.random_range(0.0..std::f64::consts::TAU);
        walkers.push((
            center + start_r * start_a.sin(),
            center + start_r * start_a.cos(),
            rng.random_range(0.0..std::f64::consts::TAU),
            size + rng.random_range(0..size),
            2,
        ));
    }
    while let Some((mut py, mut px, mut dir, steps, branches)) = walkers.pop() {
        let mut budget = branches;
        for _ in 0..steps {
            let dy = py - center;
            let dx = px - center;
            if (dy * dy + dx * dx).sqrt() > radius - 1.0 {
                break;
            }
            stamp(&mut vessels, &mut image, py, px);
            if budget > 0 && rng.random_range(0.0..1.0) < 0.04 {
                budget -= 1;
                let split = dir + rng.random_range(0.6..1.2) * [-1.0, 1.0][rng.random_range(0..2)];
                walkers.push((py, px, split, steps / 2, budget));
            }
            dir += rng.random_range(-0.3..0.3);
            py += dir.sin();
            px += dir.cos();
        }
    }
    (image, fov, vessels)
}

/// Mark one vessel pixel: set the mask and darken the image toward red.
fn stamp(vessels: &mut Array2<u8>, image: &mut Array3<f64>, py: f64, px: f64) {
    let (h, w) = vessels.dim();
    let y = py.round() as isize;
    let x = px.round() as isize;
    if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
        return;
    }
    let (y, x) = (y as usize, x as usize);
    vessels[[y, x]] = 1;
    image[[y, x, 0]] *= 0.55;
    image[[y, x, 1]] *= 0.35;
    image[[y, x, 2]] *= 0.35;
}
