//! Image I/O, colour conversion, resampling and training-set assembly.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::plane::{ImagePlane, ValueRange};

/// 8-bit RGB image, channels interleaved row by row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return invalid(format!(
                "RGB buffer of {} bytes does not match {height}x{width}",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// An LR/HR training example. Both planes share dimensions and lie in
/// `[0, 1]`; `lr` is `degrade(hr, scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub lr: ImagePlane,
    pub hr: ImagePlane,
    pub scale: usize,
}

// ---------------------------------------------------------------------------
// Colour

/// Full-range BT.601 (JFIF) RGB to YCbCr. Planes are returned unrounded on
/// the `[0, 255]` scale.
pub fn rgb_to_ycbcr(img: &RgbImage) -> (ImagePlane, ImagePlane, ImagePlane) {
    let (h, w) = (img.height, img.width);
    let mut y = Array2::zeros((h, w));
    let mut cb = Array2::zeros((h, w));
    let mut cr = Array2::zeros((h, w));
    for row in 0..h {
        for col in 0..w {
            let [r, g, b] = img.pixel(row, col).map(f64::from);
            y[[row, col]] = 0.299 * r + 0.587 * g + 0.114 * b;
            cb[[row, col]] =
                128.0 - 0.168_735_891_647_856 * r - 0.331_264_108_352_144 * g + 0.5 * b;
            cr[[row, col]] =
                128.0 + 0.5 * r - 0.418_687_589_158_345 * g - 0.081_312_410_841_655 * b;
        }
    }
    let plane = |p| ImagePlane::new(p, ValueRange::EIGHT_BIT).expect("finite conversion");
    (plane(y), plane(cb), plane(cr))
}

/// Inverse of [`rgb_to_ycbcr`], rounding and clamping to 8 bits. Planes are
/// read on the `[0, 255]` scale regardless of their declared range.
pub fn ycbcr_to_rgb(y: &ImagePlane, cb: &ImagePlane, cr: &ImagePlane) -> Result<RgbImage> {
    if y.dims() != cb.dims() || y.dims() != cr.dims() {
        return invalid("Y, Cb and Cr planes differ in size");
    }
    let (h, w) = y.dims();
    let to8 = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    let mut data = Vec::with_capacity(h * w * 3);
    for row in 0..h {
        for col in 0..w {
            let yy = y.get(row, col);
            let b = cb.get(row, col) - 128.0;
            let r = cr.get(row, col) - 128.0;
            data.push(to8(yy + 1.402 * r));
            data.push(to8(yy
                - 0.344_136_286_201_022 * b
                - 0.714_136_286_201_022 * r));
            data.push(to8(yy + 1.772 * b));
        }
    }
    RgbImage::new(h, w, data)
}

// ---------------------------------------------------------------------------
// I/O

/// A decoded image: grayscale files stay single-plane.
#[derive(Debug, Clone)]
pub enum LoadedImage {
    Gray(ImagePlane),
    Rgb(RgbImage),
}

impl LoadedImage {
    /// Luminance on the unit scale. Grayscale images are taken as Y directly.
    pub fn luma(&self) -> ImagePlane {
        match self {
            LoadedImage::Gray(p) => p.rescaled(ValueRange::UNIT),
            LoadedImage::Rgb(rgb) => rgb_to_ycbcr(rgb).0.rescaled(ValueRange::UNIT),
        }
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<LoadedImage> {
    let img = image::open(path.as_ref())?;
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Ok(LoadedImage::Rgb(RgbImage::new(
            h as usize,
            w as usize,
            rgb.into_raw(),
        )?))
    } else {
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        let data = gray.into_raw().into_iter().map(f64::from).collect();
        Ok(LoadedImage::Gray(ImagePlane::from_vec(
            h as usize,
            w as usize,
            data,
            ValueRange::EIGHT_BIT,
        )?))
    }
}

/// Loads any supported image as a unit-range luminance plane.
pub fn load_luma(path: impl AsRef<Path>) -> Result<ImagePlane> {
    Ok(load_image(path)?.luma())
}

/// Quantises a plane to 8 bits (mapping its declared range onto 0..=255).
pub fn plane_to_gray8(plane: &ImagePlane) -> Vec<u8> {
    let r = plane.value_range();
    plane
        .pixels()
        .iter()
        .map(|v| ((v - r.lo) / r.span() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn save_plane_png(plane: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = plane.dims();
    image::save_buffer(
        path,
        &plane_to_gray8(plane),
        w as u32,
        h as u32,
        image::ExtendedColorType::L8,
    )?;
    Ok(())
}

pub fn save_rgb_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    image::save_buffer(
        path,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(())
}

/// Image files (PNG/BMP) directly inside `dir`, sorted by path.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "bmp")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads a dataset manifest: one image path per line, blank lines and
/// `#` comments ignored, relative paths resolved against the manifest's
/// directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Splits paths into `(train, val)`: a path is held out when the FNV-1a hash
/// of its textual form modulo 100 falls below `val_percent`.
pub fn split_train_val(paths: &[PathBuf], val_percent: u32) -> (Vec<PathBuf>, Vec<PathBuf>) {
    paths
        .iter()
        .cloned()
        .partition(|p| fnv1a(p.to_string_lossy().as_bytes()) % 100 >= u64::from(val_percent))
}

// ---------------------------------------------------------------------------
// Resampling

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn keys_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for one output coordinate.
fn taps(out_idx: usize, src_len: usize, dst_len: usize) -> [(usize, f64); 4] {
    let pos = (out_idx as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
    let base = pos.floor();
    let t = pos - base;
    let clamp = |i: f64| i.clamp(0.0, (src_len - 1) as f64) as usize;
    [
        (clamp(base - 1.0), keys_kernel(t + 1.0)),
        (clamp(base), keys_kernel(t)),
        (clamp(base + 1.0), keys_kernel(1.0 - t)),
        (clamp(base + 2.0), keys_kernel(2.0 - t)),
    ]
}

/// Bicubic interpolation (Keys, `a = -0.5`) to `target_h x target_w`, with
/// centre-aligned sampling `src = (dst + 0.5) * src_len / dst_len - 0.5` and
/// edge-clamped taps. No anti-alias prefilter is applied when shrinking.
pub fn bicubic_resize(img: &ImagePlane, target_h: usize, target_w: usize) -> Result<ImagePlane> {
    if target_h == 0 || target_w == 0 {
        return invalid("resize target must be at least 1x1");
    }
    let (h, w) = img.dims();
    let src = img.pixels();
    let col_taps: Vec<_> = (0..target_w).map(|j| taps(j, w, target_w)).collect();
    let mut horiz = Array2::<f64>::zeros((h, target_w));
    for r in 0..h {
        for (j, t) in col_taps.iter().enumerate() {
            horiz[[r, j]] = t.iter().map(|&(c, wt)| wt * src[[r, c]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((target_h, target_w));
    for i in 0..target_h {
        let t = taps(i, h, target_h);
        for j in 0..target_w {
            out[[i, j]] = t.iter().map(|&(r, wt)| wt * horiz[[r, j]]).sum();
        }
    }
    ImagePlane::new(out, img.value_range())
}

/// Bicubic sample at a fractional position with edge clamping.
fn sample_bicubic(src: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = src.dim();
    let (by, bx) = (y.floor(), x.floor());
    let mut acc = 0.0;
    for m in -1..=2 {
        let sy = by + m as f64;
        let wy = keys_kernel(y - sy);
        let r = sy.clamp(0.0, (h - 1) as f64) as usize;
        for n in -1..=2 {
            let sx = bx + n as f64;
            let c = sx.clamp(0.0, (w - 1) as f64) as usize;
            acc += wy * keys_kernel(x - sx) * src[[r, c]];
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// Degradation

/// Builds an LR/HR pair: `hr` is cropped to a multiple of `scale`, shrunk by
/// `scale` and enlarged back with [`bicubic_resize`]. Both resampling steps
/// are clamped to the plane's value range, as an 8-bit pipeline would.
pub fn degrade(hr: &ImagePlane, scale: usize) -> Result<TrainingPair> {
    if scale == 0 {
        return invalid("scale factor must be positive");
    }
    let hr = hr.crop_to_multiple(scale)?;
    let (h, w) = hr.dims();
    let lr = if scale == 1 {
        hr.clone()
    } else {
        let down = bicubic_resize(&hr, h / scale, w / scale)?.clamped();
        bicubic_resize(&down, h, w)?.clamped()
    };
    Ok(TrainingPair { lr, hr, scale })
}

// ---------------------------------------------------------------------------
// Augmentation

pub fn flip_horizontal(img: &ImagePlane) -> ImagePlane {
    let mut p = img.pixels().clone();
    p.invert_axis(ndarray::Axis(1));
    ImagePlane::new(p, img.value_range()).expect("permutation keeps pixels finite")
}

pub fn flip_vertical(img: &ImagePlane) -> ImagePlane {
    let mut p = img.pixels().clone();
    p.invert_axis(ndarray::Axis(0));
    ImagePlane::new(p, img.value_range()).expect("permutation keeps pixels finite")
}

/// Exact rotation by a multiple of 90 degrees (counter-clockwise).
pub fn rotate_quarter_turns(img: &ImagePlane, turns: usize) -> ImagePlane {
    let mut p = img.pixels().clone();
    for _ in 0..turns % 4 {
        // CCW: new[i][j] = old[j][w-1-i]
        let (h, w) = p.dim();
        p = Array2::from_shape_fn((w, h), |(i, j)| p[[j, w - 1 - i]]);
    }
    ImagePlane::new(p, img.value_range()).expect("permutation keeps pixels finite")
}

/// Size of the largest axis-aligned rectangle inside a `w x h` rectangle
/// rotated by `angle` radians.
fn inscribed_rect(w: f64, h: f64, angle: f64) -> (f64, f64) {
    let (sin_a, cos_a) = (angle.sin().abs(), angle.cos().abs());
    let (long, short) = if w >= h { (w, h) } else { (h, w) };
    if short <= 2.0 * sin_a * cos_a * long || (sin_a - cos_a).abs() < 1e-10 {
        let x = 0.5 * short;
        if w >= h {
            (x / sin_a, x / cos_a)
        } else {
            (x / cos_a, x / sin_a)
        }
    } else {
        let cos_2a = cos_a * cos_a - sin_a * sin_a;
        (
            (w * cos_a - h * sin_a) / cos_2a,
            (h * cos_a - w * sin_a) / cos_2a,
        )
    }
}

/// Rotates by `degrees` about the image centre with bicubic resampling and
/// crops to the largest inscribed axis-aligned rectangle, so no pixel comes
/// from outside the source.
pub fn rotate_cropped(img: &ImagePlane, degrees: f64) -> Result<ImagePlane> {
    let quarter = (degrees / 90.0).round();
    if (degrees - quarter * 90.0).abs() < 1e-9 {
        return Ok(rotate_quarter_turns(img, quarter.rem_euclid(4.0) as usize));
    }
    let (h, w) = img.dims();
    let theta = degrees.to_radians();
    let (rw, rh) = inscribed_rect(w as f64, h as f64, theta);
    let (out_w, out_h) = ((rw.floor() as usize).max(1), (rh.floor() as usize).max(1));
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (oy, ox) = ((out_h as f64 - 1.0) / 2.0, (out_w as f64 - 1.0) / 2.0);
    let (s, c) = theta.sin_cos();
    let src = img.pixels();
    let out = Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (dy, dx) = (i as f64 - oy, j as f64 - ox);
        let x = cx + c * dx - s * dy;
        let y = cy + s * dx + c * dy;
        sample_bicubic(src, y, x)
    });
    ImagePlane::new(out, img.value_range())
}

pub const ROTATIONS: [f64; 5] = [45.0, 90.0, 135.0, 180.0, 225.0];
pub const DOWNSCALES: [f64; 4] = [0.6, 0.7, 0.8, 0.9];

/// The original plus five rotations, two flips and four downscaled copies
/// (12 planes, in that order). Interpolated variants are clamped to the
/// plane's value range.
pub fn augment(img: &ImagePlane) -> Result<Vec<ImagePlane>> {
    let mut out = Vec::with_capacity(12);
    out.push(img.clone());
    for deg in ROTATIONS {
        out.push(rotate_cropped(img, deg)?.clamped());
    }
    out.push(flip_horizontal(img));
    out.push(flip_vertical(img));
    let (h, w) = img.dims();
    for f in DOWNSCALES {
        let th = ((h as f64 * f).round() as usize).max(1);
        let tw = ((w as f64 * f).round() as usize).max(1);
        out.push(bicubic_resize(img, th, tw)?.clamped());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Patches

/// Cuts every source plane into a grid of HR patches and degrades each patch
/// independently, then shuffles the result with `seed`.
///
/// The patch side is rounded down to a multiple of `scale` so the degradation
/// needs no further cropping. Sources smaller than a patch are skipped.
pub fn extract_patches(
    sources: &[ImagePlane],
    patch: usize,
    stride: usize,
    scale: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    if patch < 16 {
        return invalid(format!("patch size {patch} below the minimum of 16"));
    }
    if stride == 0 || scale == 0 {
        return invalid("stride and scale must be positive");
    }
    let side = patch - patch % scale;
    let per_source = |img: &ImagePlane| -> Result<Vec<TrainingPair>> {
        let (h, w) = img.dims();
        if h < side || w < side {
            log::warn!("skipping {h}x{w} image smaller than {side}x{side} patch");
            return Ok(Vec::new());
        }
        let mut pairs = Vec::new();
        for top in (0..=h - side).step_by(stride) {
            for left in (0..=w - side).step_by(stride) {
                let hr = img
                    .crop(top, left, side, side)?
                    .rescaled(ValueRange::UNIT)
                    .clamped();
                pairs.push(degrade(&hr, scale)?);
            }
        }
        Ok(pairs)
    };
    #[cfg(feature = "parallel")]
    let grouped: Vec<Result<Vec<TrainingPair>>> = {
        use rayon::prelude::*;
        sources.par_iter().map(per_source).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let grouped: Vec<Result<Vec<TrainingPair>>> = sources.iter().map(per_source).collect();

    let mut all = Vec::new();
    for g in grouped {
        all.extend(g?);
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(all)
}

/// Loads `paths`, optionally augments each, and extracts shuffled patches.
/// At most `limit` pairs are kept.
pub fn build_training_set(
    paths: &[PathBuf],
    augment_sources: bool,
    patch: usize,
    stride: usize,
    scale: usize,
    seed: u64,
    limit: Option<usize>,
) -> Result<Vec<TrainingPair>> {
    if paths.is_empty() {
        return invalid("no training images given");
    }
    let mut sources = Vec::new();
    for p in paths {
        let luma = load_luma(p).map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(
                io.kind(),
                format!("{}: {io}", p.display()),
            )),
            other => other,
        })?;
        if augment_sources {
            sources.extend(augment(&luma)?);
        } else {
            sources.push(luma);
        }
    }
    let mut pairs = extract_patches(&sources, patch, stride, scale, seed)?;
    if let Some(n) = limit {
        pairs.truncate(n);
    }
    Ok(pairs)
}
