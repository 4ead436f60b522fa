//! 2x multi-resolution helpers. Downsampling averages 2x2 blocks (edge pixels
//! are replicated for odd sizes); upsampling uses the matching pixel-center
//! mapping `x_coarse = (x_fine + 0.5) / 2 - 0.5`.

use crate::grid::{DisplacementField, Raster};

pub(crate) const MIN_LEVEL_SIZE: usize = 8;

pub(crate) fn half(n: usize) -> usize {
    n.div_ceil(2)
}

/// Number of levels that keeps the coarsest level at least 8x8, capped at
/// `requested`.
pub(crate) fn usable_levels(width: usize, height: usize, requested: usize) -> usize {
    let mut levels = 1;
    let (mut w, mut h) = (width, height);
    while levels < requested.max(1) && half(w) >= MIN_LEVEL_SIZE && half(h) >= MIN_LEVEL_SIZE {
        w = half(w);
        h = half(h);
        levels += 1;
    }
    levels
}

pub(crate) fn downsample<R: Raster>(src: &R) -> R {
    let (w, h) = src.dims();
    let (cw, ch) = (half(w), half(h));
    let d = src.data();
    let mut out = Vec::with_capacity(cw * ch);
    for y in 0..ch {
        let (y0, y1) = (2 * y, (2 * y + 1).min(h - 1));
        for x in 0..cw {
            let (x0, x1) = (2 * x, (2 * x + 1).min(w - 1));
            out.push(0.25 * (d[y0 * w + x0] + d[y0 * w + x1] + d[y1 * w + x0] + d[y1 * w + x1]));
        }
    }
    R::from_resampled(cw, ch, out)
}

/// Bilinear upsampling of a coarse field onto a `width x height` grid with
/// displacements doubled.
pub(crate) fn upsample_field(
    coarse: &DisplacementField,
    width: usize,
    height: usize,
) -> DisplacementField {
    let (cw, ch) = coarse.dims();
    let coord = |fine: usize, n: usize| -> (usize, usize, f64) {
        let c = ((fine as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, c - lo as f64)
    };
    let mut dx = Vec::with_capacity(width * height);
    let mut dy = Vec::with_capacity(width * height);
    for y in 0..height {
        let (y0, y1, ty) = coord(y, ch);
        for x in 0..width {
            let (x0, x1, tx) = coord(x, cw);
            for (src, dst) in [(coarse.dx(), &mut dx), (coarse.dy(), &mut dy)] {
                let top = src[y0 * cw + x0] * (1.0 - tx) + src[y0 * cw + x1] * tx;
                let bottom = src[y1 * cw + x0] * (1.0 - tx) + src[y1 * cw + x1] * tx;
                dst.push(2.0 * (top * (1.0 - ty) + bottom * ty));
            }
        }
    }
    DisplacementField::from_parts_unchecked(width, height, dx, dy)
}
