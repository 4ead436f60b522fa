//! Backward (pull) warping with bilinear interpolation and edge clamping.
//!
//! The output pixel `p` takes the value of the source sampled at
//! `p + field[p]`. Sample coordinates outside the grid are clamped to the
//! border, so the output is defined everywhere; the in-bounds mask records
//! which samples needed no clamping.

use crate::error::Result;
use crate::grid::{ensure_same_dims, DisplacementField, LabelMap2D, Raster};

#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult<R> {
    pub warped: R,
    pub in_bounds_mask: LabelMap2D,
}

/// Derivative of each warped pixel with respect to its own displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGradient {
    width: usize,
    height: usize,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
}

impl SampleGradient {
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.gx[i], self.gy[i])
    }
}

/// Bilinear stencil for one sample coordinate along an axis of length `n`.
#[derive(Clone, Copy)]
struct Axis {
    lo: usize,
    hi: usize,
    t: f64,
    inside: bool,
}

#[inline]
fn axis(coord: f64, n: usize) -> Axis {
    let max = (n - 1) as f64;
    let inside = (0.0..=max).contains(&coord);
    let c = coord.clamp(0.0, max);
    if n == 1 {
        return Axis {
            lo: 0,
            hi: 0,
            t: 0.0,
            inside,
        };
    }
    let lo = (c.floor() as usize).min(n - 2);
    Axis {
        lo,
        hi: lo + 1,
        t: c - lo as f64,
        inside,
    }
}

/// Warps `src` and, when requested, the partial derivatives of every output
/// sample with respect to `dx` and `dy` of the same pixel.
pub(crate) fn warp_raw(
    src: &[f64],
    width: usize,
    height: usize,
    field: &DisplacementField,
    mut derivs: Option<(&mut [f64], &mut [f64])>,
    mut mask: Option<&mut [f64]>,
) -> Vec<f64> {
    let (dx, dy) = (field.dx(), field.dy());
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let ax = axis(x as f64 + dx[i], width);
            let ay = axis(y as f64 + dy[i], height);
            let s00 = src[ay.lo * width + ax.lo];
            let s01 = src[ay.lo * width + ax.hi];
            let s10 = src[ay.hi * width + ax.lo];
            let s11 = src[ay.hi * width + ax.hi];
            let top = s00 + (s01 - s00) * ax.t;
            let bottom = s10 + (s11 - s10) * ax.t;
            out[i] = top + (bottom - top) * ay.t;
            if let Some((gx, gy)) = derivs.as_mut() {
                gx[i] = if ax.inside {
                    (s01 - s00) * (1.0 - ay.t) + (s11 - s10) * ay.t
                } else {
                    0.0
                };
                gy[i] = if ay.inside { bottom - top } else { 0.0 };
            }
            if let Some(m) = mask.as_mut() {
                m[i] = if ax.inside && ay.inside { 1.0 } else { 0.0 };
            }
        }
    }
    out
}

/// Warps an image or label map by `field`.
pub fn warp<R: Raster>(src: &R, field: &DisplacementField) -> Result<WarpResult<R>> {
    ensure_same_dims(src.dims(), field.dims())?;
    let (w, h) = src.dims();
    let mut mask = vec![0.0; w * h];
    let values = warp_raw(src.data(), w, h, field, None, Some(&mut mask));
    Ok(WarpResult {
        warped: R::from_resampled(w, h, values),
        in_bounds_mask: LabelMap2D::from_resampled(w, h, mask),
    })
}

/// Warp without the mask, for hot paths.
pub fn warp_values<R: Raster>(src: &R, field: &DisplacementField) -> Result<R> {
    ensure_same_dims(src.dims(), field.dims())?;
    let (w, h) = src.dims();
    Ok(R::from_resampled(
        w,
        h,
        warp_raw(src.data(), w, h, field, None, None),
    ))
}

/// `∂ warped[p] / ∂ field[p]` from the bilinear stencil. Zero along an axis
/// whose sample coordinate was clamped.
pub fn sample_gradient<R: Raster>(src: &R, field: &DisplacementField) -> Result<SampleGradient> {
    ensure_same_dims(src.dims(), field.dims())?;
    let (w, h) = src.dims();
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    warp_raw(src.data(), w, h, field, Some((&mut gx, &mut gy)), None);
    Ok(SampleGradient {
        width: w,
        height: h,
        gx,
        gy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Image2D;
    use crate::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image2D {
        Image2D::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn zero_field_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 7, 5);
        let r = warp(&img, &DisplacementField::zeros(7, 5)).unwrap();
        assert_eq!(r.warped, img);
        assert!(r.in_bounds_mask.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unit_shift_moves_bright_pixel_left() {
        let img = Image2D::from_fn(5, 5, |x, y| if (x, y) == (2, 2) { 1.0 } else { 0.0 }).unwrap();
        let r = warp(&img, &DisplacementField::constant(5, 5, 1.0, 0.0)).unwrap();
        // Hand evaluation: out(x, y) = src(x + 1, y), so the peak moves to x = 1.
        let expected =
            Image2D::from_fn(5, 5, |x, y| if (x, y) == (1, 2) { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(r.warped, expected);
        // Rightmost column samples x = 5, which is outside.
        for y in 0..5 {
            assert_eq!(r.in_bounds_mask.at(4, y), 0.0);
            assert_eq!(r.in_bounds_mask.at(3, y), 1.0);
        }
    }

    #[test]
    fn constant_source_stays_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Image2D::constant(6, 6, 0.7).unwrap();
        let f = DisplacementField::from_fn(6, 6, |_, _| {
            (rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0))
        })
        .unwrap();
        assert!(warp(&img, &f)
            .unwrap()
            .warped
            .data()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-15));
        let g = sample_gradient(&img, &f).unwrap();
        assert!(g.gx.iter().chain(&g.gy).all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_gradient_is_exact() {
        let img = Image2D::from_fn(6, 6, |x, _| x as f64).unwrap();
        let g = sample_gradient(&img, &DisplacementField::zeros(6, 6)).unwrap();
        for y in 1..5 {
            for x in 1..5 {
                assert_eq!(g.at(x, y), (1.0, 0.0));
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let img = Image2D::constant(4, 4, 1.0).unwrap();
        assert!(matches!(
            warp(&img, &DisplacementField::zeros(4, 5)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(sample_gradient(&img, &DisplacementField::zeros(3, 4)).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Independent oracle: central differences of the warp itself.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (w, h) = (8, 8);
        let img = random_image(&mut rng, w, h);
        let field = DisplacementField::from_fn(w, h, |_, _| {
            (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5))
        })
        .unwrap();
        let g = sample_gradient(&img, &field).unwrap();
        let step = 1e-6;
        let mut checked = 0;
        for i in 0..w * h {
            for comp in 0..2 {
                let base = if comp == 0 {
                    field.dx()[i]
                } else {
                    field.dy()[i]
                };
                let pos = [(i % w) as f64, (i / w) as f64][comp] + base;
                let frac = pos - pos.floor();
                // Skip stencil-cell boundaries and clamped coordinates.
                if !(1e-3..=1.0 - 1e-3).contains(&frac) || !(0.0..=7.0).contains(&pos) {
                    continue;
                }
                let mut plus = field.clone();
                let mut minus = field.clone();
                if comp == 0 {
                    plus.components_mut().0[i] += step;
                    minus.components_mut().0[i] -= step;
                } else {
                    plus.components_mut().1[i] += step;
                    minus.components_mut().1[i] -= step;
                }
                let fd = (warp(&img, &plus).unwrap().warped.data()[i]
                    - warp(&img, &minus).unwrap().warped.data()[i])
                    / (2.0 * step);
                let analytic = if comp == 0 { g.gx[i] } else { g.gy[i] };
                let rel = (fd - analytic).abs() / analytic.abs().max(1e-8);
                assert!(
                    rel < 1e-4 || (fd - analytic).abs() < 1e-9,
                    "pixel {i} comp {comp}: {fd} vs {analytic}"
                );
                checked += 1;
            }
        }
        assert!(checked > 60);
    }

    #[test]
    fn subpixel_shift_preserves_label_mass_up_to_a_ring() {
        let label =
            LabelMap2D::from_mask(16, 16, |x, y| (4..12).contains(&x) && (4..12).contains(&y))
                .unwrap();
        let warped = warp(&label, &DisplacementField::constant(16, 16, 0.3, -0.4))
            .unwrap()
            .warped;
        assert!(warped.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // One boundary ring of the 8x8 square holds 28 pixels.
        assert!((warped.mass() - label.mass()).abs() <= 28.0);
    }

    proptest! {
        #[test]
        fn warp_is_linear_in_source(
            a in -3.0f64..3.0, b in -3.0f64..3.0,
            s1 in prop::collection::vec(-1.0f64..1.0, 36),
            s2 in prop::collection::vec(-1.0f64..1.0, 36),
            f in prop::collection::vec(-4.0f64..4.0, 72),
        ) {
            let field = DisplacementField::new(6, 6, f[..36].to_vec(), f[36..].to_vec()).unwrap();
            let i1 = Image2D::new(6, 6, s1).unwrap();
            let i2 = Image2D::new(6, 6, s2).unwrap();
            let mix = Image2D::new(6, 6, i1.data().iter().zip(i2.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let lhs = warp(&mix, &field).unwrap().warped;
            let w1 = warp(&i1, &field).unwrap().warped;
            let w2 = warp(&i2, &field).unwrap().warped;
            for k in 0..36 {
                prop_assert!((lhs.data()[k] - (a * w1.data()[k] + b * w2.data()[k])).abs() < 1e-12);
            }
        }

        #[test]
        fn warped_labels_stay_in_unit_interval(
            l in prop::collection::vec(0.0f64..=1.0, 25),
            f in prop::collection::vec(-6.0f64..6.0, 50),
        ) {
            let field = DisplacementField::new(5, 5, f[..25].to_vec(), f[25..].to_vec()).unwrap();
            let label = LabelMap2D::new(5, 5, l).unwrap();
            let r = warp(&label, &field).unwrap();
            prop_assert!(r.warped.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(r.in_bounds_mask.is_binary());
        }
    }
}
