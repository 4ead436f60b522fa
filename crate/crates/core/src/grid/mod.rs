//! Raster types shared by every stage of the pipeline, plus intensity
//! preprocessing.
//!
//! Layout is row-major with `(row = y, col = x)` indexing and pixel centers at
//! integer coordinates, so `data[y * width + x]` is the pixel at `(x, y)`.

mod oasg;
mod volume;

pub use oasg::{read_oasg, read_oasg_from, write_oasg, write_oasg_to, GridKind, OasgGrid};
pub use volume::{
    is_volume_dir, read_volume, read_volume_or_slice, slice_file_name, write_volume, Spacing,
    Volume,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Common read access to scalar rasters (images and label maps).
pub trait Raster: Sized {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn data(&self) -> &[f64];

    /// Rebuilds a raster of the same kind from resampled values. Label maps
    /// clamp into `[0, 1]` to absorb rounding in convex combinations.
    fn from_resampled(width: usize, height: usize, data: Vec<f64>) -> Self;

    fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }

    fn len(&self) -> usize {
        self.width() * self.height()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        self.data()[y * self.width() + x]
    }
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidData(format!(
            "grid must be non-empty, got {width}x{height}"
        )));
    }
    if width.checked_mul(height) != Some(len) {
        return Err(Error::InvalidData(format!(
            "data length {len} does not match {width}x{height}"
        )));
    }
    Ok(())
}

pub(crate) fn ensure_same_dims(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// Sums a row-major buffer row by row, then across the row totals.
///
/// Every reduction in the crate goes through this so results do not depend on
/// how per-pixel work was scheduled.
pub(crate) fn row_major_sum<F>(width: usize, height: usize, mut term: F) -> f64
where
    F: FnMut(usize) -> f64,
{
    let mut total = 0.0;
    for y in 0..height {
        let base = y * width;
        let mut row = 0.0;
        for x in 0..width {
            row += term(base + x);
        }
        total += row;
    }
    total
}

/// Scalar intensity image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image2D {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image2D {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite intensity at index {i}"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn mean(&self) -> f64 {
        row_major_sum(self.width, self.height, |i| self.data[i]) / self.data.len() as f64
    }

    /// Population variance (1/N).
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        row_major_sum(self.width, self.height, |i| {
            let d = self.data[i] - mean;
            d * d
        }) / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn is_constant(&self) -> bool {
        let first = self.data[0];
        self.data.iter().all(|&v| v == first)
    }

    /// Mirror about the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

impl Raster for Image2D {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn data(&self) -> &[f64] {
        &self.data
    }
    fn from_resampled(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(width * height, data.len());
        Self {
            width,
            height,
            data,
        }
    }
}

/// Soft single-structure label map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap2D {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl LabelMap2D {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len())?;
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidData(format!(
                "label value {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    /// Binary map from a predicate.
    pub fn from_mask(
        width: usize,
        height: usize,
        mut inside: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        Self::from_fn(width, height, |x, y| if inside(x, y) { 1.0 } else { 0.0 })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height])
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// True iff every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn mass(&self) -> f64 {
        row_major_sum(self.width, self.height, |i| self.data[i])
    }

    /// Number of pixels at or above 0.5.
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn is_foreground(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] >= 0.5
    }
}

impl Raster for LabelMap2D {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn data(&self) -> &[f64] {
        &self.data
    }
    fn from_resampled(width: usize, height: usize, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(width * height, data.len());
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self {
            width,
            height,
            data,
        }
    }
}

/// Per-pixel displacement in pixel units. Output pixel `p` samples its source
/// at `p + (dx[p], dy[p])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField {
    width: usize,
    height: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl DisplacementField {
    pub fn new(width: usize, height: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        check_len(width, height, dx.len())?;
        check_len(width, height, dy.len())?;
        if dx.iter().chain(dy.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite displacement".into()));
        }
        Ok(Self {
            width,
            height,
            dx,
            dy,
        })
    }

    pub(crate) fn from_parts_unchecked(
        width: usize,
        height: usize,
        dx: Vec<f64>,
        dy: Vec<f64>,
    ) -> Self {
        debug_assert!(dx.len() == width * height && dy.len() == width * height);
        Self {
            width,
            height,
            dx,
            dy,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            dx: vec![0.0; width * height],
            dy: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, dx: f64, dy: f64) -> Self {
        Self {
            width,
            height,
            dx: vec![dx; width * height],
            dy: vec![dy; width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Result<Self> {
        let mut dx = Vec::with_capacity(width * height);
        let mut dy = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(x, y);
                dx.push(u);
                dy.push(v);
            }
        }
        Self::new(width, height, dx, dy)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    pub(crate) fn components_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.dx, &mut self.dy)
    }

    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    /// Largest absolute component, i.e. the ∞-norm over both channels.
    pub fn max_abs(&self) -> f64 {
        self.dx
            .iter()
            .chain(self.dy.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest per-pixel displacement length.
    pub fn max_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .fold(0.0_f64, |m, (u, v)| m.max((u * u + v * v).sqrt()))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            dx: self.dx.iter().map(|v| v * factor).collect(),
            dy: self.dy.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(self.dy.iter()).all(|v| v.is_finite())
    }
}

/// Standardizes intensities to zero mean and unit population variance.
pub fn normalize(img: &Image2D) -> Result<Image2D> {
    if img.is_constant() {
        return Err(Error::ConstantImage);
    }
    let mean = img.mean();
    let std = img.variance().sqrt();
    if std == 0.0 || !std.is_finite() {
        return Err(Error::ConstantImage);
    }
    let data = img.data.iter().map(|v| (v - mean) / std).collect();
    Ok(Image2D {
        width: img.width,
        height: img.height,
        data,
    })
}

/// Bilinear resampling to `width x height` with corner-aligned grids and edge
/// clamping. Output values stay inside the input range.
pub fn resize<R: Raster>(img: &R, width: usize, height: usize) -> Result<R> {
    if width < 2 || height < 2 {
        return Err(Error::DegenerateTarget { width, height });
    }
    let (w, h) = img.dims();
    if (w, h) == (width, height) {
        return Ok(R::from_resampled(w, h, img.data().to_vec()));
    }
    let sx = if w > 1 {
        (w - 1) as f64 / (width - 1) as f64
    } else {
        0.0
    };
    let sy = if h > 1 {
        (h - 1) as f64 / (height - 1) as f64
    } else {
        0.0
    };
    let src = img.data();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = y as f64 * sy;
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..width {
            let fx = x as f64 * sx;
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    // Convex combinations can overshoot the input range by an ulp.
    let (lo, hi) = src
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    for v in &mut out {
        *v = v.clamp(lo, hi);
    }
    Ok(R::from_resampled(width, height, out))
}

/// Hard segmentation: `1` where `label >= t`, else `0`.
pub fn threshold(label: &LabelMap2D, t: f64) -> Result<LabelMap2D> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidParams(format!(
            "threshold {t} must lie in (0, 1)"
        )));
    }
    let data = label
        .data
        .iter()
        .map(|&v| if v >= t { 1.0 } else { 0.0 })
        .collect();
    Ok(LabelMap2D {
        width: label.width,
        height: label.height,
        data,
    })
}
