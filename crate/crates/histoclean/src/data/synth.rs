//! Synthetic paired-artifact corpus.
//!
//! Real slide archives have no pixel-aligned (artifact, clean) pairs, which
//! makes automated verification impossible. This generator renders smooth
//! tissue-like tiles and composites one class-specific corruption per
//! requested class onto each, storing the corruption coverage as a mask:
//! opaque strokes for pen marker, translucent blotches for ink, a regional
//! Gaussian blur, ring gradients for air bubbles, a darkened compression
//! band for tissue folds, speckle for dust and thin curvilinear strokes for
//! filaments. Corruptions only need to be class-separable and removable,
//! not photorealistic.
//!
//! Directory layout: `clean/<scene>.png`, `artifact/<scene>_<class>.png`,
//! `masks/<scene>_<class>.png` and `manifest.txt`.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;

use super::{
    save_manifest, DataError, Domain, Magnification, Manifest, Split, SyntheticSpec, TileRecord,
    CLASS_NAMES,
};

/// Tunable ranges for the class renderers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    /// Opacity range of opaque blobs/strokes (pen marker).
    pub blob_opacity: (f64, f64),
    /// Gaussian σ range for the out-of-focus class.
    pub blur_sigma: (f64, f64),
    /// Stroke thickness range in pixels (filament).
    pub stripe_width: (f64, f64),
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            blob_opacity: (0.85, 1.0),
            blur_sigma: (1.5, 3.0),
            stripe_width: (1.2, 2.5),
        }
    }
}

/// Coverage below this threshold is zeroed so that untouched pixels stay
/// bit-identical to the clean tile, and any touched pixel gets a nonzero
/// mask byte.
const COVERAGE_FLOOR: f32 = 1.0 / 512.0;

fn smoothstep(t: f32) -> f32 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Bilinearly interpolated random grid in `[-1, 1]`.
fn value_noise(size: usize, cells: usize, rng: &mut impl Rng) -> Array2<f32> {
    let g = cells + 1;
    let grid: Vec<f32> = (0..g * g).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let mut out = Array2::zeros((size, size));
    let scale = cells as f32 / size as f32;
    for y in 0..size {
        let fy = y as f32 * scale;
        let y0 = fy.floor() as usize;
        let wy = fy - y0 as f32;
        let y1 = (y0 + 1).min(cells);
        for x in 0..size {
            let fx = x as f32 * scale;
            let x0 = fx.floor() as usize;
            let wx = fx - x0 as f32;
            let x1 = (x0 + 1).min(cells);
            let top = grid[y0 * g + x0] * (1.0 - wx) + grid[y0 * g + x1] * wx;
            let bot = grid[y1 * g + x0] * (1.0 - wx) + grid[y1 * g + x1] * wx;
            out[(y, x)] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Renders one smooth tissue-like tile in `[0,1]` RGB.
pub fn render_clean_tile(size: usize, rng: &mut impl Rng) -> Array3<f32> {
    // Pale eosin-range base colour with smooth low-frequency structure.
    let base = [
        rng.random_range(0.80f32..0.93),
        rng.random_range(0.58f32..0.72),
        rng.random_range(0.70f32..0.85),
    ];
    let coarse = value_noise(size, 4, rng);
    let medium = value_noise(size, 9, rng);
    let tint = value_noise(size, 6, rng);
    let mut img = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let lum = 0.07 * coarse[(y, x)] + 0.04 * medium[(y, x)];
            let t = 0.03 * tint[(y, x)];
            img[(0, y, x)] = base[0] + lum + t;
            img[(1, y, x)] = base[1] + lum - t;
            img[(2, y, x)] = base[2] + lum;
        }
    }
    // A few soft darker clusters standing in for dense nuclei regions.
    let clusters = rng.random_range(3..7);
    for _ in 0..clusters {
        let cx = rng.random_range(0.0f32..size as f32);
        let cy = rng.random_range(0.0f32..size as f32);
        let r = rng.random_range(size as f32 * 0.08..size as f32 * 0.22);
        let depth = rng.random_range(0.05f32..0.13);
        let (y0, y1) = clip_range(cy, r, size);
        let (x0, x1) = clip_range(cx, r, size);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                let a = smoothstep(1.0 - d / r) * depth;
                img[(0, y, x)] -= a;
                img[(1, y, x)] -= a * 1.4;
                img[(2, y, x)] -= a * 0.6;
            }
        }
    }
    img.mapv_inplace(|v| v.clamp(0.03, 0.99));
    img
}

fn clip_range(center: f32, radius: f32, size: usize) -> (usize, usize) {
    let lo = (center - radius - 1.0).floor().max(0.0) as usize;
    let hi = ((center + radius + 2.0).ceil() as usize).min(size);
    (lo, hi)
}

fn stamp_disk(cov: &mut Array2<f32>, cx: f32, cy: f32, r: f32) {
    let size = cov.dim().0;
    let (y0, y1) = clip_range(cy, r, size);
    let (x0, x1) = clip_range(cx, r, size);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
            let a = (r - d + 0.5).clamp(0.0, 1.0);
            if a > cov[(y, x)] {
                cov[(y, x)] = a;
            }
        }
    }
}

fn stamp_ellipse(cov: &mut Array2<f32>, cx: f32, cy: f32, rx: f32, ry: f32, angle: f32) {
    let size = cov.dim().0;
    let r = rx.max(ry);
    let (y0, y1) = clip_range(cy, r, size);
    let (x0, x1) = clip_range(cx, r, size);
    let (sin, cos) = angle.sin_cos();
    let feather = 1.5 / rx.min(ry);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let u = (dx * cos + dy * sin) / rx;
            let v = (-dx * sin + dy * cos) / ry;
            let q = (u * u + v * v).sqrt();
            let a = smoothstep((1.0 - q) / feather);
            if a > cov[(y, x)] {
                cov[(y, x)] = a;
            }
        }
    }
}

/// Curvy stroke: a random walk with angular momentum, stamped as disks.
fn stroke(cov: &mut Array2<f32>, rng: &mut impl Rng, thickness: f32, curliness: f32) {
    let size = cov.dim().0 as f32;
    // Enter from a random edge, heading inwards.
    let (mut x, mut y, mut angle) = match rng.random_range(0..4) {
        0 => (rng.random_range(0.0..size), 0.0, std::f32::consts::FRAC_PI_2),
        1 => (rng.random_range(0.0..size), size - 1.0, -std::f32::consts::FRAC_PI_2),
        2 => (0.0, rng.random_range(0.0..size), 0.0),
        _ => (size - 1.0, rng.random_range(0.0..size), std::f32::consts::PI),
    };
    angle += rng.random_range(-0.5f32..0.5);
    let steps = (size * 1.8) as usize;
    for _ in 0..steps {
        stamp_disk(cov, x, y, thickness * 0.5 + 0.5);
        angle += rng.random_range(-curliness..curliness);
        x += angle.cos();
        y += angle.sin();
        if x < -thickness || y < -thickness || x > size + thickness || y > size + thickness {
            break;
        }
    }
}

fn gaussian_blur(src: &Array3<f32>, sigma: f32) -> Array3<f32> {
    let radius = (sigma * 3.0).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f32;
    for i in -radius..=radius {
        let v = (-(i * i) as f32 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let (c, h, w) = src.dim();
    let reflect = |t: isize, n: usize| -> usize {
        let n = n as isize;
        let mut t = t;
        if t < 0 {
            t = -t;
        }
        if t >= n {
            t = 2 * n - 2 - t;
        }
        t.clamp(0, n - 1) as usize
    };
    let mut tmp = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + ki as isize - radius, w);
                    acc += src[(ch, y, sx)] * kv;
                }
                tmp[(ch, y, x)] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + ki as isize - radius, h);
                    acc += tmp[(ch, sy, x)] * kv;
                }
                out[(ch, y, x)] = acc;
            }
        }
    }
    out
}

fn floor_coverage(cov: &mut Array2<f32>) {
    cov.mapv_inplace(|v| if v < COVERAGE_FLOOR { 0.0 } else { v.min(1.0) });
}

/// Blends a flat colour over the tile wherever the coverage is nonzero.
fn composite_color(
    clean: &Array3<f32>,
    cov: &Array2<f32>,
    color: [f32; 3],
    opacity: f32,
) -> Array3<f32> {
    let (_, h, w) = clean.dim();
    let mut out = clean.clone();
    for y in 0..h {
        for x in 0..w {
            let a = cov[(y, x)] * opacity;
            if a > 0.0 {
                for ch in 0..3 {
                    out[(ch, y, x)] = clean[(ch, y, x)] * (1.0 - a) + color[ch] * a;
                }
            }
        }
    }
    out
}

const PEN_COLORS: [[f32; 3]; 3] = [
    [0.05, 0.10, 0.45],
    [0.05, 0.32, 0.12],
    [0.08, 0.08, 0.08],
];
const INK_COLORS: [[f32; 3]; 3] = [
    [0.55, 0.08, 0.10],
    [0.10, 0.12, 0.55],
    [0.12, 0.35, 0.40],
];

/// Renders one corruption of `class` over a clean tile, returning the
/// corrupted tile and the coverage mask in `[0,1]`.
pub fn render_artifact_tile(
    clean: &Array3<f32>,
    class: usize,
    params: &RenderParams,
    rng: &mut impl Rng,
) -> Result<(Array3<f32>, Array2<f32>), DataError> {
    let (_, h, w) = clean.dim();
    assert_eq!(h, w, "tiles are square");
    let size = h;
    let s = size as f32;
    let mut cov = Array2::<f32>::zeros((size, size));
    let img = match class {
        // Pen marker: one or two thick opaque strokes.
        0 => {
            let color = PEN_COLORS[rng.random_range(0..PEN_COLORS.len())];
            let opacity = rng.random_range(params.blob_opacity.0..=params.blob_opacity.1) as f32;
            let n = rng.random_range(1..=2);
            for _ in 0..n {
                let thickness = rng.random_range(s * 0.10..s * 0.20);
                stroke(&mut cov, rng, thickness, 0.12);
            }
            floor_coverage(&mut cov);
            composite_color(clean, &cov, color, opacity)
        }
        // Ink: translucent blotches.
        1 => {
            let color = INK_COLORS[rng.random_range(0..INK_COLORS.len())];
            let opacity = rng.random_range(0.30f32..0.60);
            let n = rng.random_range(1..=3);
            for _ in 0..n {
                let cx = rng.random_range(s * 0.2..s * 0.8);
                let cy = rng.random_range(s * 0.2..s * 0.8);
                let rx = rng.random_range(s * 0.12..s * 0.30);
                let ry = rng.random_range(s * 0.12..s * 0.30);
                stamp_ellipse(&mut cov, cx, cy, rx, ry, rng.random_range(0.0..3.14));
            }
            floor_coverage(&mut cov);
            composite_color(clean, &cov, color, opacity)
        }
        // Out of focus: Gaussian blur inside a soft disk region.
        2 => {
            let sigma = rng.random_range(params.blur_sigma.0..=params.blur_sigma.1) as f32;
            let cx = rng.random_range(s * 0.3..s * 0.7);
            let cy = rng.random_range(s * 0.3..s * 0.7);
            let r = rng.random_range(s * 0.30..s * 0.48);
            for y in 0..size {
                for x in 0..size {
                    let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                    cov[(y, x)] = smoothstep((r - d) / (s * 0.06));
                }
            }
            floor_coverage(&mut cov);
            let blurred = gaussian_blur(clean, sigma);
            let mut out = clean.clone();
            for y in 0..size {
                for x in 0..size {
                    let a = cov[(y, x)];
                    if a > 0.0 {
                        for ch in 0..3 {
                            out[(ch, y, x)] =
                                clean[(ch, y, x)] * (1.0 - a) + blurred[(ch, y, x)] * a;
                        }
                    }
                }
            }
            out
        }
        // Air bubble: darkened ring with a slightly washed interior.
        3 => {
            let cx = rng.random_range(s * 0.3..s * 0.7);
            let cy = rng.random_range(s * 0.3..s * 0.7);
            let r = rng.random_range(s * 0.20..s * 0.35);
            let band = rng.random_range(s * 0.04..s * 0.08);
            let ring_dark = rng.random_range(0.40f32..0.60);
            let mut out = clean.clone();
            for y in 0..size {
                for x in 0..size {
                    let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                    let ring = smoothstep(1.0 - (d - r).abs() / band);
                    let interior = smoothstep((r - band - d) / (s * 0.02));
                    let a = ring.max(interior * 0.6);
                    cov[(y, x)] = a;
                    if a >= COVERAGE_FLOOR {
                        for ch in 0..3 {
                            let darkened = clean[(ch, y, x)] * ring_dark;
                            let washed = clean[(ch, y, x)] * 0.92 + 0.08;
                            let target = if ring > interior * 0.6 { darkened } else { washed };
                            out[(ch, y, x)] = clean[(ch, y, x)] * (1.0 - a) + target * a;
                        }
                    }
                }
            }
            floor_coverage(&mut cov);
            out
        }
        // Tissue fold: a dark band whose texture is compressed toward the
        // band's spine.
        4 => {
            let angle = rng.random_range(0.0f32..std::f32::consts::PI);
            let (nx, ny) = (angle.cos(), angle.sin());
            let offset = rng.random_range(s * 0.3..s * 0.7);
            let bw = rng.random_range(s * 0.05..s * 0.10);
            let darken = rng.random_range(0.55f32..0.75);
            let squeeze = rng.random_range(0.3f32..0.6);
            let mut out = clean.clone();
            for y in 0..size {
                for x in 0..size {
                    let d = (x as f32 * nx + y as f32 * ny) - offset;
                    if d.abs() < bw {
                        let a = smoothstep(1.0 - d.abs() / bw);
                        cov[(y, x)] = a;
                        let shift = d * squeeze;
                        let sxp = (x as f32 - shift * nx).clamp(0.0, s - 1.0) as usize;
                        let syp = (y as f32 - shift * ny).clamp(0.0, s - 1.0) as usize;
                        for ch in 0..3 {
                            let folded = clean[(ch, syp, sxp)] * (1.0 - a * (1.0 - darken));
                            out[(ch, y, x)] = clean[(ch, y, x)] * (1.0 - a) + folded * a;
                        }
                    }
                }
            }
            floor_coverage(&mut cov);
            out
        }
        // Dust: small dark specks.
        5 => {
            let n = rng.random_range(8..=20);
            let max_r = (s / 24.0).max(2.0);
            for _ in 0..n {
                let cx = rng.random_range(0.0..s);
                let cy = rng.random_range(0.0..s);
                let r = rng.random_range(1.0..max_r);
                stamp_disk(&mut cov, cx, cy, r);
            }
            floor_coverage(&mut cov);
            let shade = rng.random_range(0.08f32..0.22);
            let color = [shade, shade * 0.9, shade * 0.8];
            let opacity = rng.random_range(0.70f32..1.0);
            composite_color(clean, &cov, color, opacity)
        }
        // Filament: thin curvilinear strokes.
        6 => {
            let n = rng.random_range(1..=2);
            for _ in 0..n {
                let thickness =
                    rng.random_range(params.stripe_width.0..=params.stripe_width.1) as f32;
                stroke(&mut cov, rng, thickness, 0.35);
            }
            floor_coverage(&mut cov);
            let shade = rng.random_range(0.10f32..0.25);
            let color = [shade, shade, shade * 1.1];
            let opacity = rng.random_range(0.75f32..1.0);
            composite_color(clean, &cov, color, opacity)
        }
        other => return Err(DataError::UnknownClass(other)),
    };
    let mut img = img;
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok((img, cov))
}

fn unit_rgb_to_image(arr: &Array3<f32>) -> RgbImage {
    let (_, h, w) = arr.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([0, 1, 2].map(|c| (arr[(c, y, x)] * 255.0).round() as u8));
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img
}

fn mask_to_image(mask: &Array2<f32>) -> GrayImage {
    let (h, w) = mask.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = mask[(y, x)];
            // Touched pixels never quantise to zero.
            let byte = if v > 0.0 {
                ((v * 255.0).round() as u8).max(1)
            } else {
                0
            };
            img.put_pixel(x as u32, y as u32, image::Luma([byte]));
        }
    }
    img
}

/// Renders the corpus on disk and returns its manifest (all records start
/// in the train split; run the splitter afterwards). Deterministic in
/// `spec.seed`, byte-for-byte.
pub fn synthesize_corpus(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest, DataError> {
    spec.validate()?;
    let mut classes = spec.classes.clone();
    classes.sort_unstable();
    classes.dedup();
    for sub in ["clean", "artifact", "masks"] {
        std::fs::create_dir_all(out_dir.join(sub)).map_err(|source| DataError::Io {
            path: out_dir.join(sub),
            source,
        })?;
    }
    let mut records = Vec::new();
    for i in 0..spec.n_scenes {
        let scene = format!("scene{i:04}");
        let mut scene_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "scene", i as u64));
        let clean = render_clean_tile(spec.tile_size, &mut scene_rng);
        let clean_rel = format!("clean/{scene}.png");
        let clean_path = out_dir.join(&clean_rel);
        unit_rgb_to_image(&clean)
            .save(&clean_path)
            .map_err(|source| DataError::Image {
                path: clean_path.clone(),
                source,
            })?;
        let magnification = if i % 2 == 0 {
            Magnification::X10
        } else {
            Magnification::X40
        };
        records.push(TileRecord {
            id: scene.clone(),
            image_path: clean_path,
            domain: Domain::Clean,
            label: None,
            magnification,
            source_id: scene.clone(),
            split: Split::Train,
            paired_clean_id: None,
        });
        for &class in &classes {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                spec.seed,
                "artifact",
                ((i as u64) << 8) | class as u64,
            ));
            let (img, mask) = render_artifact_tile(&clean, class, &spec.params, &mut rng)?;
            let art_rel = format!("artifact/{scene}_{class}.png");
            let art_path = out_dir.join(&art_rel);
            unit_rgb_to_image(&img)
                .save(&art_path)
                .map_err(|source| DataError::Image {
                    path: art_path.clone(),
                    source,
                })?;
            let mask_path = out_dir.join(format!("masks/{scene}_{class}.png"));
            mask_to_image(&mask)
                .save(&mask_path)
                .map_err(|source| DataError::Image {
                    path: mask_path.clone(),
                    source,
                })?;
            records.push(TileRecord {
                id: format!("{scene}_{class}"),
                image_path: art_path,
                domain: Domain::Artifact,
                label: Some(class),
                magnification,
                source_id: scene.clone(),
                split: Split::Train,
                paired_clean_id: Some(scene.clone()),
            });
        }
    }
    let manifest = Manifest {
        records,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        tile_size: spec.tile_size,
    };
    manifest.validate(true)?;
    save_manifest(&manifest, &out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// Path of the stored corruption mask for an artifact tile, derived from
/// the corpus layout (`artifact/X.png` → `masks/X.png`).
pub fn mask_path_for(record: &TileRecord) -> Option<std::path::PathBuf> {
    let file = record.image_path.file_name()?;
    let dir = record.image_path.parent()?;
    if dir.file_name()? != "artifact" {
        return None;
    }
    Some(dir.parent()?.join("masks").join(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;
    use std::path::PathBuf;

    #[test]
    fn corpus_layout_and_counts_follow_the_spec() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::new(4, vec![0, 2, 5], 48, 7);
        let manifest = synthesize_corpus(&spec, dir.path()).unwrap();
        let clean = manifest
            .records
            .iter()
            .filter(|r| r.domain == Domain::Clean)
            .count();
        let artifact = manifest
            .records
            .iter()
            .filter(|r| r.domain == Domain::Artifact)
            .count();
        assert_eq!((clean, artifact), (4, 12));
        assert!(manifest
            .records
            .iter()
            .filter(|r| r.domain == Domain::Artifact)
            .all(|r| r.paired_clean_id.is_some()));
        assert!(dir.path().join("clean/scene0000.png").exists());
        assert!(dir.path().join("artifact/scene0001_2.png").exists());
        assert!(dir.path().join("masks/scene0001_2.png").exists());
        // The written manifest loads and validates, files included.
        let loaded = load_manifest(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(loaded.records.len(), 16);
    }

    #[test]
    fn identical_seeds_give_identical_bytes_and_distinct_seeds_differ() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let d3 = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::new(2, vec![0, 6], 40, 11);
        synthesize_corpus(&spec, d1.path()).unwrap();
        synthesize_corpus(&spec, d2.path()).unwrap();
        let mut other = spec.clone();
        other.seed = 12;
        synthesize_corpus(&other, d3.path()).unwrap();
        for rel in ["clean/scene0000.png", "artifact/scene0001_6.png"] {
            let a = std::fs::read(d1.path().join(rel)).unwrap();
            let b = std::fs::read(d2.path().join(rel)).unwrap();
            let c = std::fs::read(d3.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} must be reproducible");
            assert_ne!(a, c, "{rel} must vary with the seed");
        }
    }

    /// For every non-blur class, the artifact tile differs from its clean
    /// pair only where the stored mask is nonzero.
    #[test]
    fn corruption_stays_inside_the_stored_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clean = render_clean_tile(48, &mut rng);
        let params = RenderParams::default();
        for class in [0usize, 1, 3, 4, 5, 6] {
            let mut arng = ChaCha8Rng::seed_from_u64(100 + class as u64);
            let (img, mask) = render_artifact_tile(&clean, class, &params, &mut arng).unwrap();
            let clean_u8 = unit_rgb_to_image(&clean);
            let art_u8 = unit_rgb_to_image(&img);
            let mask_u8 = mask_to_image(&mask);
            let mut touched = 0usize;
            for y in 0..48u32 {
                for x in 0..48u32 {
                    let diff = clean_u8.get_pixel(x, y) != art_u8.get_pixel(x, y);
                    if diff {
                        touched += 1;
                        assert!(
                            mask_u8.get_pixel(x, y).0[0] > 0,
                            "class {class}: pixel ({x},{y}) changed outside the mask"
                        );
                    }
                }
            }
            assert!(touched > 10, "class {class} rendered an empty corruption");
        }
    }

    #[test]
    fn unknown_class_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let clean = render_clean_tile(32, &mut rng);
        assert!(matches!(
            render_artifact_tile(&clean, 9, &RenderParams::default(), &mut rng),
            Err(DataError::UnknownClass(9))
        ));
    }

    #[test]
    fn mask_paths_derive_from_the_corpus_layout() {
        let r = TileRecord {
            id: "scene0001_2".into(),
            image_path: PathBuf::from("/tmp/corpus/artifact/scene0001_2.png"),
            domain: Domain::Artifact,
            label: Some(2),
            magnification: Magnification::X10,
            source_id: "scene0001".into(),
            split: Split::Train,
            paired_clean_id: Some("scene0001".into()),
        };
        assert_eq!(
            mask_path_for(&r).unwrap(),
            PathBuf::from("/tmp/corpus/masks/scene0001_2.png")
        );
    }
}
