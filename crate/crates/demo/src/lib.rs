//! Browser front end: basis kernels, the coefficient-loss profile of a
//! degraded image, and a side-by-side degradation preview with scores.
//!
//! The plain functions work on RGBA buffers as handed over by a canvas and
//! are usable (and tested) natively; the `#[wasm_bindgen]` wrappers only map
//! errors to JS exceptions.

use ttdsr::data::{degrade, rgb_to_ycbcr, RgbImage};
use ttdsr::metrics::score_y;
use ttdsr::tcheb::{coefficient_loss_profile, make_basis, tile_grid, zigzag_order};
use ttdsr::{ImagePlane, ValueRange};
use wasm_bindgen::prelude::*;

/// An RGBA image ready for `ImageData`.
#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Raster {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

impl Raster {
    fn from_plane(plane: &ImagePlane) -> Self {
        let r = plane.value_range();
        let (height, width) = plane.dims();
        let rgba = plane
            .pixels()
            .iter()
            .flat_map(|v| {
                let g = ((v - r.lo) / r.span() * 255.0).round().clamp(0.0, 255.0) as u8;
                [g, g, g, 255]
            })
            .collect();
        Self {
            width,
            height,
            rgba,
        }
    }
}

#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct Preview {
    degraded: Raster,
    original: Raster,
    psnr: f64,
    ssim: f64,
}

#[wasm_bindgen]
impl Preview {
    #[wasm_bindgen(getter)]
    pub fn degraded(&self) -> Raster {
        self.degraded.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn original(&self) -> Raster {
        self.original.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn psnr(&self) -> f64 {
        self.psnr
    }

    #[wasm_bindgen(getter)]
    pub fn ssim(&self) -> f64 {
        self.ssim
    }
}

/// Unit-range luminance of an RGBA buffer (alpha ignored).
pub fn luma_from_rgba(rgba: &[u8], width: usize, height: usize) -> Result<ImagePlane, String> {
    if width == 0 || height == 0 || rgba.len() != width * height * 4 {
        return Err(format!(
            "{} bytes is not a {width}x{height} RGBA image",
            rgba.len()
        ));
    }
    let rgb: Vec<u8> = rgba
        .chunks_exact(4)
        .flat_map(|p| [p[0], p[1], p[2]])
        .collect();
    let img = RgbImage::new(height, width, rgb).map_err(|e| e.to_string())?;
    Ok(rgb_to_ycbcr(&img).0.rescaled(ValueRange::UNIT))
}

/// The `n x n` Tchebichef kernels in zig-zag order on an `n`-column grid,
/// each tile magnified `zoom` times.
pub fn basis_tiles(n: usize, zoom: usize) -> Result<Raster, String> {
    let basis = make_basis(n).map_err(|e| e.to_string())?;
    let kernels: Vec<_> = zigzag_order(n)
        .into_iter()
        .map(|(p, q)| basis.kernel_pq(p, q))
        .collect();
    let grid = tile_grid(&kernels, n).map_err(|e| e.to_string())?;
    Ok(Raster::from_plane(&magnify(&grid, zoom.max(1))))
}

fn magnify(plane: &ImagePlane, zoom: usize) -> ImagePlane {
    let (h, w) = plane.dims();
    let data = (0..h * zoom)
        .flat_map(|r| (0..w * zoom).map(move |c| (r / zoom, c / zoom)))
        .map(|(r, c)| plane.get(r, c))
        .collect();
    ImagePlane::from_vec(h * zoom, w * zoom, data, plane.value_range()).expect("magnified plane")
}

/// Per zig-zag channel: how much the mean |moment| drops when the image is
/// degraded by `scale` (magnitude).
pub fn frequency_profile(
    rgba: &[u8],
    width: usize,
    height: usize,
    scale: usize,
) -> Result<Vec<f64>, String> {
    let y = luma_from_rgba(rgba, width, height)?;
    let pair = degrade(&y, scale).map_err(|e| e.to_string())?;
    let basis = make_basis(8).map_err(|e| e.to_string())?;
    let profile =
        coefficient_loss_profile(&pair.hr, &pair.lr, &basis).map_err(|e| e.to_string())?;
    Ok(profile.iter().map(|v| v.abs()).collect())
}

/// Bicubic down/up degradation of the luminance, with PSNR/SSIM against
/// the original (8-bit scale, `scale`-pixel border excluded).
pub fn degrade_preview(
    rgba: &[u8],
    width: usize,
    height: usize,
    scale: usize,
) -> Result<Preview, String> {
    let y = luma_from_rgba(rgba, width, height)?;
    let pair = degrade(&y, scale).map_err(|e| e.to_string())?;
    let (psnr, ssim) = score_y(&pair.lr, &pair.hr, scale).map_err(|e| e.to_string())?;
    Ok(Preview {
        degraded: Raster::from_plane(&pair.lr),
        original: Raster::from_plane(&pair.hr),
        psnr,
        ssim,
    })
}

/// A zone plate: concentric rings whose frequency rises towards the edge,
/// so every band of the spectrum is present.
pub fn zone_plate(size: usize) -> Raster {
    let c = size as f64 / 2.0;
    let k = std::f64::consts::PI / size as f64;
    let data = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            0.5 + 0.5 * (k * (x * x + y * y)).cos()
        })
        .collect();
    Raster::from_plane(
        &ImagePlane::from_vec(size, size, data, ValueRange::UNIT).expect("zone plate"),
    )
}

#[wasm_bindgen(js_name = basisTiles)]
pub fn basis_tiles_js(n: usize, zoom: usize) -> Result<Raster, JsError> {
    basis_tiles(n, zoom).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = frequencyProfile)]
pub fn frequency_profile_js(
    rgba: &[u8],
    width: usize,
    height: usize,
    scale: usize,
) -> Result<Vec<f64>, JsError> {
    frequency_profile(rgba, width, height, scale).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = degradePreview)]
pub fn degrade_preview_js(
    rgba: &[u8],
    width: usize,
    height: usize,
    scale: usize,
) -> Result<Preview, JsError> {
    degrade_preview(rgba, width, height, scale).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = zonePlate)]
pub fn zone_plate_js(size: usize) -> Raster {
    zone_plate(size.clamp(16, 1024))
}
