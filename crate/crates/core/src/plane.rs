use ndarray::Array2;

use crate::error::{invalid, Result};

/// Nominal range of pixel values for a plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueRange {
    pub lo: f64,
    pub hi: f64,
}

impl ValueRange {
    pub const UNIT: ValueRange = ValueRange { lo: 0.0, hi: 1.0 };
    pub const EIGHT_BIT: ValueRange = ValueRange { lo: 0.0, hi: 255.0 };

    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }
}

/// A single-channel real-valued image.
///
/// Pixels are only required to lie inside `value_range` at I/O boundaries;
/// intermediate results (residuals, transforms) may leave it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    pixels: Array2<f64>,
    value_range: ValueRange,
}

impl ImagePlane {
    pub fn new(pixels: Array2<f64>, value_range: ValueRange) -> Result<Self> {
        if pixels.nrows() == 0 || pixels.ncols() == 0 {
            return invalid("image plane must have positive dimensions");
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return invalid("image plane contains non-finite pixels");
        }
        Ok(Self {
            pixels,
            value_range,
        })
    }

    pub fn from_vec(
        height: usize,
        width: usize,
        data: Vec<f64>,
        range: ValueRange,
    ) -> Result<Self> {
        if data.len() != height * width {
            return invalid(format!(
                "pixel buffer has {} values, expected {}x{}",
                data.len(),
                height,
                width
            ));
        }
        let pixels = Array2::from_shape_vec((height, width), data)
            .map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
        Self::new(pixels, range)
    }

    pub fn filled(height: usize, width: usize, value: f64, range: ValueRange) -> Self {
        Self {
            pixels: Array2::from_elem((height, width), value),
            value_range: range,
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Array2<f64> {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }

    pub fn value_range(&self) -> ValueRange {
        self.value_range
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[[row, col]]
    }

    /// Applies `f` to every pixel, keeping the declared range.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            pixels: self.pixels.mapv(f),
            value_range: self.value_range,
        }
    }

    pub fn clamped(&self) -> Self {
        let ValueRange { lo, hi } = self.value_range;
        self.map(|v| v.clamp(lo, hi))
    }

    /// Linearly rescales pixel values to a new nominal range.
    pub fn rescaled(&self, to: ValueRange) -> Self {
        let from = self.value_range;
        let k = to.span() / from.span();
        Self {
            pixels: self.pixels.mapv(|v| to.lo + (v - from.lo) * k),
            value_range: to,
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height() || left + width > self.width()
        {
            return invalid(format!(
                "crop {}x{}+{}+{} outside {}x{} plane",
                height,
                width,
                top,
                left,
                self.height(),
                self.width()
            ));
        }
        let view = self
            .pixels
            .slice(ndarray::s![top..top + height, left..left + width]);
        Ok(Self {
            pixels: view.to_owned(),
            value_range: self.value_range,
        })
    }

    /// Crops from the top-left so both dimensions are multiples of `factor`.
    pub fn crop_to_multiple(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return invalid("crop factor must be positive");
        }
        let h = self.height() - self.height() % factor;
        let w = self.width() - self.width() % factor;
        self.crop(0, 0, h, w)
    }

    /// Removes `border` pixels from every side.
    pub fn shave(&self, border: usize) -> Result<Self> {
        if 2 * border >= self.height() || 2 * border >= self.width() {
            return invalid(format!(
                "border {border} too large for {:?} plane",
                self.dims()
            ));
        }
        self.crop(
            border,
            border,
            self.height() - 2 * border,
            self.width() - 2 * border,
        )
    }
}
