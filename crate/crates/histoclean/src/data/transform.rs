//! Pixel transforms: normalisation to the generator's tanh range, flips,
//! crops and bilinear resizing.
//!
//! Tiles travel as `(3, H, W)` arrays in `[-1, 1]` (`x/127.5 − 1`). The
//! resize uses the half-pixel-centre convention (corner alignment off) so
//! fixtures are bit-exact.

use std::path::Path;

use image::RgbImage;
use ndarray::{Array3, Axis};
use rand::Rng;

use super::{AugmentConfig, DataError};

/// 8-bit RGB image to `(3,H,W)` floats in `[-1,1]`.
pub fn normalize(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = px.0[c] as f32 / 127.5 - 1.0;
        }
    }
    out
}

/// Inverse of [`normalize`]; values are clamped then rounded, so the
/// round trip through an 8-bit image is exact.
pub fn denormalize(arr: &Array3<f32>) -> RgbImage {
    let (c, h, w) = arr.dim();
    assert_eq!(c, 3, "denormalize expects 3 channels");
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([0, 1, 2].map(|ch| {
                let v = (arr[(ch, y, x)].clamp(-1.0, 1.0) + 1.0) * 127.5;
                v.round() as u8
            }));
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img
}

pub fn load_tile(path: &Path) -> Result<Array3<f32>, DataError> {
    let img = image::open(path)
        .map_err(|source| DataError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(normalize(&img))
}

pub fn save_tile(arr: &Array3<f32>, path: &Path) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    denormalize(arr)
        .save(path)
        .map_err(|source| DataError::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Bilinear resize with the half-pixel-centre convention.
pub fn resize_bilinear(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let mut out = Array3::zeros((c, out_h, out_w));
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            for ch in 0..c {
                let top = src[(ch, y0, x0)] * (1.0 - wx) + src[(ch, y0, x1)] * wx;
                let bot = src[(ch, y1, x0)] * (1.0 - wx) + src[(ch, y1, x1)] * wx;
                out[(ch, oy, ox)] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

fn crop(src: &Array3<f32>, y: usize, x: usize, size: usize) -> Array3<f32> {
    src.slice(ndarray::s![.., y..y + size, x..x + size])
        .to_owned()
}

fn check_size(src: &Array3<f32>, need: usize) -> Result<(), DataError> {
    let (_, h, w) = src.dim();
    if h < need || w < need {
        return Err(DataError::ImageTooSmall { h, w, need });
    }
    Ok(())
}

/// Training transform: independent horizontal/vertical flips, a uniformly
/// positioned crop of `crop_size`, then a resize to `out_size`.
pub fn augment(
    src: &Array3<f32>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Array3<f32>, DataError> {
    check_size(src, cfg.crop_size)?;
    let (_, h, w) = src.dim();
    // Draw order is fixed: horizontal flip, vertical flip, crop y, crop x.
    let flip_h = rng.random_bool(cfg.flip_h_prob);
    let flip_v = rng.random_bool(cfg.flip_v_prob);
    let cy = rng.random_range(0..=h - cfg.crop_size);
    let cx = rng.random_range(0..=w - cfg.crop_size);
    let mut img = src.clone();
    if flip_h {
        img.invert_axis(Axis(2));
    }
    if flip_v {
        img.invert_axis(Axis(1));
    }
    let cropped = crop(&img, cy, cx, cfg.crop_size);
    Ok(resize_bilinear(&cropped, cfg.out_size, cfg.out_size))
}

/// Evaluation transform: deterministic centre crop then resize, no flips.
pub fn eval_transform(src: &Array3<f32>, cfg: &AugmentConfig) -> Result<Array3<f32>, DataError> {
    check_size(src, cfg.crop_size)?;
    let (_, h, w) = src.dim();
    let cy = (h - cfg.crop_size) / 2;
    let cx = (w - cfg.crop_size) / 2;
    let cropped = crop(src, cy, cx, cfg.crop_size);
    Ok(resize_bilinear(&cropped, cfg.out_size, cfg.out_size))
}
