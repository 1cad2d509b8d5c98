//! Array-backed image primitives: resizing, affine warping, and PNG/TIFF/GIF
//! decode/encode.
//!
//! Images are `Array3<f64>` in `(height, width, channel)` layout with values
//! in `[0, 1]`; masks are `Array2<u8>` with values in `{0, 1}`. Images are
//! resampled bilinearly, masks with nearest-neighbor so they stay binary.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("failed to read image {path}: {source}")]
    Decode {
        path: std::path::PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to write image {path}: {source}")]
    Encode {
        path: std::path::PathBuf,
        #[source]
        source: image::ImageError,
    },
}

/// Pixel-center mapping from destination index to source coordinate for a
/// resize from `src_len` to `dst_len` samples.
#[inline]
fn src_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * (src_len as f64 / dst_len as f64) - 0.5
}

/// Bilinear resize of an `(H, W, C)` image, edge-clamped.
pub fn resize_bilinear(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let mut out = Array3::zeros((out_h, out_w, c));
    for oy in 0..out_h {
        let sy = src_coord(oy, h, out_h);
        let y0 = sy.floor().clamp(0.0, (h - 1) as f64) as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64).clamp(0.0, 1.0);
        for ox in 0..out_w {
            let sx = src_coord(ox, w, out_w);
            let x0 = sx.floor().clamp(0.0, (w - 1) as f64) as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64).clamp(0.0, 1.0);
            for ch in 0..c {
                let top = img[[y0, x0, ch]] * (1.0 - fx) + img[[y0, x1, ch]] * fx;
                let bot = img[[y1, x0, ch]] * (1.0 - fx) + img[[y1, x1, ch]] * fx;
                out[[oy, ox, ch]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Bilinear resize of a single-channel `(H, W)` map, edge-clamped.
pub fn resize_bilinear_gray(img: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut out = Array2::zeros((out_h, out_w));
    for oy in 0..out_h {
        let sy = src_coord(oy, h, out_h);
        let y0 = sy.floor().clamp(0.0, (h - 1) as f64) as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64).clamp(0.0, 1.0);
        for ox in 0..out_w {
            let sx = src_coord(ox, w, out_w);
            let x0 = sx.floor().clamp(0.0, (w - 1) as f64) as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64).clamp(0.0, 1.0);
            let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
            let bot = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
            out[[oy, ox]] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Nearest-neighbor resize of a binary mask, re-binarized so the output
/// contains only `{0, 1}`.
pub fn resize_nearest_mask(mask: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut out = Array2::zeros((out_h, out_w));
    for oy in 0..out_h {
        let sy = src_coord(oy, h, out_h).round().clamp(0.0, (h - 1) as f64) as usize;
        for ox in 0..out_w {
            let sx = src_coord(ox, w, out_w).round().clamp(0.0, (w - 1) as f64) as usize;
            out[[oy, ox]] = u8::from(mask[[sy, sx]] != 0);
        }
    }
    out
}

/// An invertible affine map: flip, isotropic scale, rotation about the image
/// center, then translation. Applied to images and masks by inverse mapping,
/// so the same `AffineMap` moves both through identical geometry.
#[derive(Debug, Clone, Copy)]
pub struct AffineMap {
    /// Rotation in radians, counterclockwise in (col, row) coordinates.
    pub theta: f64,
    pub scale: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    /// Translation in pixels, (dx, dy).
    pub translate: (f64, f64),
}

impl AffineMap {
    pub fn identity() -> Self {
        AffineMap {
            theta: 0.0,
            scale: 1.0,
            flip_h: false,
            flip_v: false,
            translate: (0.0, 0.0),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.theta == 0.0
            && self.scale == 1.0
            && !self.flip_h
            && !self.flip_v
            && self.translate == (0.0, 0.0)
    }

    /// Inverse-map a destination pixel (x = col, y = row) to its source
    /// coordinate for an `h`×`w` frame.
    #[inline]
    pub fn source_of(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let vx = x - cx - self.translate.0;
        let vy = y - cy - self.translate.1;
        let (sin, cos) = self.theta.sin_cos();
        // R(-theta)
        let ux = cos * vx + sin * vy;
        let uy = -sin * vx + cos * vy;
        let fx = if self.flip_h { -1.0 } else { 1.0 };
        let fy = if self.flip_v { -1.0 } else { 1.0 };
        (fx * ux / self.scale + cx, fy * uy / self.scale + cy)
    }
}

/// Warp an `(H, W, C)` image; samples bilinearly, zero outside the frame.
pub fn warp_image(img: &Array3<f64>, map: &AffineMap) -> Array3<f64> {
    if map.is_identity() {
        return img.clone();
    }
    let (h, w, c) = img.dim();
    let mut out = Array3::zeros((h, w, c));
    for oy in 0..h {
        for ox in 0..w {
            let (sx, sy) = map.source_of(ox as f64, oy as f64, h, w);
            if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                continue;
            }
            let x0f = sx.floor();
            let y0f = sy.floor();
            let fx = sx - x0f;
            let fy = sy - y0f;
            for ch in 0..c {
                let mut acc = 0.0;
                for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                    for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                        let yy = y0f + dy;
                        let xx = x0f + dx;
                        if yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64 {
                            acc += wy * wx * img[[yy as usize, xx as usize, ch]];
                        }
                    }
                }
                out[[oy, ox, ch]] = acc;
            }
        }
    }
    out
}

/// Warp a binary mask through the same geometry; samples nearest-neighbor,
/// zero outside the frame.
pub fn warp_mask(mask: &Array2<u8>, map: &AffineMap) -> Array2<u8> {
    if map.is_identity() {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let mut out = Array2::zeros((h, w));
    for oy in 0..h {
        for ox in 0..w {
            let (sx, sy) = map.source_of(ox as f64, oy as f64, h, w);
            let sxr = sx.round();
            let syr = sy.round();
            if sxr < 0.0 || syr < 0.0 || sxr >= w as f64 || syr >= h as f64 {
                continue;
            }
            out[[oy, ox]] = u8::from(mask[[syr as usize, sxr as usize]] != 0);
        }
    }
    out
}

/// Decode an RGB image to `(H, W, 3)` in `[0, 1]`. 8- and 16-bit inputs both
/// map losslessly (8-bit v becomes v/255 exactly).
pub fn load_rgb(path: &Path) -> Result<Array3<f64>, ImageIoError> {
    let img = image::open(path).map_err(|source| ImageIoError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(dynamic_to_rgb_array(&img))
}

pub fn dynamic_to_rgb_array(img: &DynamicImage) -> Array3<f64> {
    let rgb = img.to_rgb16();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            out[[y as usize, x as usize, ch]] = f64::from(px.0[ch]) / 65535.0;
        }
    }
    out
}

/// Decode a mask image to binary `{0, 1}` (luma > 127 counts as 1).
pub fn load_mask(path: &Path) -> Result<Array2<u8>, ImageIoError> {
    let img = image::open(path).map_err(|source| ImageIoError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in gray.enumerate_pixels() {
        out[[y as usize, x as usize]] = u8::from(px.0[0] > 127);
    }
    Ok(out)
}

/// Save an `(H, W, 3)` image as 16-bit RGB PNG (lossless for preprocessed
/// training data).
pub fn save_rgb16(path: &Path, img: &Array3<f64>) -> Result<(), ImageIoError> {
    let (h, w, _) = img.dim();
    let mut buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = img[[y as usize, x as usize, ch]].clamp(0.0, 1.0);
            px.0[ch] = (v * 65535.0).round() as u16;
        }
    }
    buf.save(path).map_err(|source| ImageIoError::Encode {
        path: path.to_path_buf(),
        source,
    })
}

/// Save an `(H, W, 3)` image as 8-bit RGB PNG.
pub fn save_rgb8(path: &Path, img: &Array3<f64>) -> Result<(), ImageIoError> {
    let (h, w, _) = img.dim();
    let mut buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = img[[y as usize, x as usize, ch]].clamp(0.0, 1.0);
            px.0[ch] = (v * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|source| ImageIoError::Encode {
        path: path.to_path_buf(),
        source,
    })
}

/// Save a binary mask as an 8-bit grayscale PNG (0 or 255).
pub fn save_mask(path: &Path, mask: &Array2<u8>) -> Result<(), ImageIoError> {
    let (h, w) = mask.dim();
    let mut buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        px.0[0] = if mask[[y as usize, x as usize]] != 0 { 255 } else { 0 };
    }
    buf.save(path).map_err(|source| ImageIoError::Encode {
        path: path.to_path_buf(),
        source,
    })
}

/// Save a probability map in `[0, 1]` as a 16-bit grayscale PNG.
pub fn save_gray16(path: &Path, map: &Array2<f64>) -> Result<(), ImageIoError> {
    let (h, w) = map.dim();
    let mut buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let v = map[[y as usize, x as usize]].clamp(0.0, 1.0);
        px.0[0] = (v * 65535.0).round() as u16;
    }
    buf.save(path).map_err(|source| ImageIoError::Encode {
        path: path.to_path_buf(),
        source,
    })
}

/// Read only the dimensions `(width, height)` of an image file.
pub fn image_dimensions(path: &Path) -> Result<(u32, u32), ImageIoError> {
    image::image_dimensions(path).map_err(|source| ImageIoError::Decode {
        path: path.to_path_buf(),
        source,
    })
}
