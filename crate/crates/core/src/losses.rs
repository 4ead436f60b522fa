//! Registration objective: global normalized cross-correlation between the
//! warped atlas and the target, soft Dice between the warped atlas label and the
//! target label, and a first-order smoothness penalty on the field, combined as
//! `alpha * sim + beta * dice + gamma * smooth`.
//!
//! Every term has an analytic gradient with respect to the displacement field.
//! All reductions use [`row_major_sum`] so the losses are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    ensure_same_dims, row_major_sum, DisplacementField, Image2D, LabelMap2D, Raster,
};
use crate::transform::warp_raw;

/// Guards the Dice denominator for empty labels.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.01,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParams(format!(
                "loss weights must be finite and >= 0, got {self:?}"
            )));
        }
        if all.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidParams(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim: f64,
    pub dice: f64,
    pub smooth: f64,
    pub total: f64,
}

/// Negative global normalized cross-correlation, in `[-1, 1]`.
pub fn ncc_loss(warped: &Image2D, target: &Image2D) -> Result<f64> {
    ensure_same_dims(target.dims(), warped.dims())?;
    let (w, h) = target.dims();
    let t = Centered::new(target.data(), w, h)?;
    let a = Centered::new(warped.data(), w, h)?;
    Ok(-a.correlation(&t, w, h))
}

/// Soft Dice loss `-2 Σ(a·b) / (Σa + Σb + ε)`, in `[-1, 0]`.
pub fn dice_loss(warped_label: &LabelMap2D, target_label: &LabelMap2D) -> Result<f64> {
    ensure_same_dims(target_label.dims(), warped_label.dims())?;
    let (w, h) = target_label.dims();
    let (a, b) = (warped_label.data(), target_label.data());
    let inter = row_major_sum(w, h, |i| a[i] * b[i]);
    let union = warped_label.mass() + target_label.mass() + DICE_EPS;
    Ok(-2.0 * inter / union)
}

/// Mean over pixels of the squared forward differences of both field
/// components. The difference past the last row/column is taken as zero.
pub fn smoothness_loss(field: &DisplacementField) -> f64 {
    let (w, h) = field.dims();
    let (dx, dy) = (field.dx(), field.dy());
    let sum = row_major_sum(w, h, |i| {
        let (x, y) = (i % w, i / w);
        let mut acc = 0.0;
        for c in [dx, dy] {
            if x + 1 < w {
                let d = c[i + 1] - c[i];
                acc += d * d;
            }
            if y + 1 < h {
                let d = c[i + w] - c[i];
                acc += d * d;
            }
        }
        acc
    });
    sum / (w * h) as f64
}

fn add_smoothness_gradient(field: &DisplacementField, scale: f64, gx: &mut [f64], gy: &mut [f64]) {
    let (w, h) = field.dims();
    let k = 2.0 * scale / (w * h) as f64;
    for (c, g) in [(field.dx(), &mut *gx), (field.dy(), &mut *gy)] {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let d = k * (c[i + 1] - c[i]);
                    g[i] -= d;
                    g[i + 1] += d;
                }
                if y + 1 < h {
                    let d = k * (c[i + w] - c[i]);
                    g[i] -= d;
                    g[i + w] += d;
                }
            }
        }
    }
}

/// Mean-centered copy of an image and its squared norm.
struct Centered {
    values: Vec<f64>,
    norm_sq: f64,
}

impl Centered {
    fn new(data: &[f64], w: usize, h: usize) -> Result<Self> {
        let mean = row_major_sum(w, h, |i| data[i]) / data.len() as f64;
        let values: Vec<f64> = data.iter().map(|v| v - mean).collect();
        let norm_sq = row_major_sum(w, h, |i| values[i] * values[i]);
        if norm_sq <= 0.0 || !norm_sq.is_finite() {
            return Err(Error::ConstantImage);
        }
        Ok(Self { values, norm_sq })
    }

    fn cross(&self, other: &Centered, w: usize, h: usize) -> f64 {
        row_major_sum(w, h, |i| self.values[i] * other.values[i])
    }

    fn correlation(&self, other: &Centered, w: usize, h: usize) -> f64 {
        (self.cross(other, w, h) / (self.norm_sq * other.norm_sq).sqrt()).clamp(-1.0, 1.0)
    }
}

/// An atlas/target pair. Labels are optional; the Dice term is active only
/// when both are present.
#[derive(Debug, Clone, Copy)]
pub struct RegistrationPair<'a> {
    pub atlas_image: &'a Image2D,
    pub atlas_label: Option<&'a LabelMap2D>,
    pub target_image: &'a Image2D,
    pub target_label: Option<&'a LabelMap2D>,
}

impl<'a> RegistrationPair<'a> {
    pub fn labeled(
        atlas_image: &'a Image2D,
        atlas_label: &'a LabelMap2D,
        target_image: &'a Image2D,
        target_label: &'a LabelMap2D,
    ) -> Self {
        Self {
            atlas_image,
            atlas_label: Some(atlas_label),
            target_image,
            target_label: Some(target_label),
        }
    }

    pub fn unlabeled(atlas_image: &'a Image2D, target_image: &'a Image2D) -> Self {
        Self {
            atlas_image,
            atlas_label: None,
            target_image,
            target_label: None,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.target_image.dims()
    }

    fn labels(&self) -> Option<(&'a LabelMap2D, &'a LabelMap2D)> {
        self.atlas_label.zip(self.target_label)
    }

    fn validate(&self) -> Result<()> {
        let dims = self.target_image.dims();
        ensure_same_dims(dims, self.atlas_image.dims())?;
        if let Some(l) = self.atlas_label {
            ensure_same_dims(dims, l.dims())?;
        }
        if let Some(l) = self.target_label {
            ensure_same_dims(dims, l.dims())?;
        }
        Ok(())
    }
}

/// The weighted objective for one pair with target-side statistics cached.
pub struct Objective<'a> {
    pair: RegistrationPair<'a>,
    weights: LossWeights,
    target: Option<Centered>,
    target_label_mass: f64,
}

impl<'a> Objective<'a> {
    pub fn new(pair: RegistrationPair<'a>, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        pair.validate()?;
        let (w, h) = pair.dims();
        let target = if weights.alpha > 0.0 {
            Some(Centered::new(pair.target_image.data(), w, h)?)
        } else {
            None
        };
        let target_label_mass = pair.target_label.map_or(0.0, LabelMap2D::mass);
        Ok(Self {
            pair,
            weights,
            target,
            target_label_mass,
        })
    }

    pub fn pair(&self) -> &RegistrationPair<'a> {
        &self.pair
    }

    pub fn weights(&self) -> LossWeights {
        self.weights
    }

    /// Weight of the Dice term after accounting for missing labels.
    pub fn effective_beta(&self) -> f64 {
        if self.pair.labels().is_some() {
            self.weights.beta
        } else {
            0.0
        }
    }

    pub fn loss(&self, field: &DisplacementField) -> Result<LossBreakdown> {
        self.evaluate(field, false).map(|(l, _)| l)
    }

    pub fn loss_and_gradient(
        &self,
        field: &DisplacementField,
    ) -> Result<(LossBreakdown, DisplacementField)> {
        let (loss, grad) = self.evaluate(field, true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    fn evaluate(
        &self,
        field: &DisplacementField,
        want_grad: bool,
    ) -> Result<(LossBreakdown, Option<DisplacementField>)> {
        ensure_same_dims(self.pair.dims(), field.dims())?;
        let (w, h) = self.pair.dims();
        let n = w * h;
        let LossWeights { alpha, gamma, .. } = self.weights;
        let beta = self.effective_beta();
        let (mut gx, mut gy) = if want_grad {
            (vec![0.0; n], vec![0.0; n])
        } else {
            (Vec::new(), Vec::new())
        };
        let mut sx = vec![0.0; if want_grad { n } else { 0 }];
        let mut sy = vec![0.0; if want_grad { n } else { 0 }];

        let mut sim = 0.0;
        if let Some(target) = &self.target {
            let derivs = want_grad.then_some((&mut sx[..], &mut sy[..]));
            let warped = warp_raw(self.pair.atlas_image.data(), w, h, field, derivs, None);
            let a = Centered::new(&warped, w, h)?;
            let inv = 1.0 / (a.norm_sq * target.norm_sq).sqrt();
            let ncc = a.cross(target, w, h) * inv;
            sim = -ncc.clamp(-1.0, 1.0);
            if want_grad {
                // d ncc / d a_i = b'_i / sqrt(AB) - ncc * a'_i / A; the mean
                // terms cancel because centered values sum to zero.
                let k_a = ncc / a.norm_sq;
                for i in 0..n {
                    let d_sim = -alpha * (target.values[i] * inv - k_a * a.values[i]);
                    gx[i] += d_sim * sx[i];
                    gy[i] += d_sim * sy[i];
                }
            }
        }

        let mut dice = 0.0;
        if let Some((atlas_label, target_label)) = self.pair.labels() {
            let derivs = (want_grad && beta > 0.0).then_some((&mut sx[..], &mut sy[..]));
            let warped = warp_raw(atlas_label.data(), w, h, field, derivs, None);
            let t = target_label.data();
            let inter = row_major_sum(w, h, |i| warped[i].clamp(0.0, 1.0) * t[i]);
            let mass = row_major_sum(w, h, |i| warped[i].clamp(0.0, 1.0));
            let union = mass + self.target_label_mass + DICE_EPS;
            dice = -2.0 * inter / union;
            if want_grad && beta > 0.0 {
                let k = 2.0 * inter / (union * union);
                for i in 0..n {
                    let d_dice = beta * (-2.0 * t[i] / union + k);
                    gx[i] += d_dice * sx[i];
                    gy[i] += d_dice * sy[i];
                }
            }
        }

        let smooth = smoothness_loss(field);
        if want_grad && gamma > 0.0 {
            add_smoothness_gradient(field, gamma, &mut gx, &mut gy);
        }

        let total = alpha * sim + beta * dice + gamma * smooth;
        let loss = LossBreakdown {
            sim,
            dice,
            smooth,
            total,
        };
        let grad = want_grad.then(|| DisplacementField::from_parts_unchecked(w, h, gx, gy));
        Ok((loss, grad))
    }
}

/// Weighted total for one pair; `dice` is reported as 0 when either label is
/// missing.
pub fn total_loss(
    pair: RegistrationPair<'_>,
    field: &DisplacementField,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    Objective::new(pair, weights)?.loss(field)
}

/// `∂ total / ∂ field` for every pixel and component.
pub fn total_loss_gradient(
    pair: RegistrationPair<'_>,
    field: &DisplacementField,
    weights: LossWeights,
) -> Result<DisplacementField> {
    Objective::new(pair, weights)?
        .loss_and_gradient(field)
        .map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image2D {
        Image2D::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn ncc_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 9, 7);
        assert!((ncc_loss(&x, &x).unwrap() + 1.0).abs() < 1e-9);
        let affine = Image2D::new(9, 7, x.data().iter().map(|v| 3.0 * v - 2.0).collect()).unwrap();
        assert!((ncc_loss(&x, &affine).unwrap() + 1.0).abs() < 1e-9);
        let neg = Image2D::new(9, 7, x.data().iter().map(|v| -v).collect()).unwrap();
        assert!((ncc_loss(&x, &neg).unwrap() - 1.0).abs() < 1e-9);
        assert!(matches!(
            ncc_loss(&x, &Image2D::constant(9, 7, 1.0).unwrap()),
            Err(Error::ConstantImage)
        ));
    }

    #[test]
    fn dice_anchors() {
        let a = LabelMap2D::from_mask(16, 16, |x, y| (2..10).contains(&x) && (4..12).contains(&y))
            .unwrap();
        assert!((dice_loss(&a, &a).unwrap() + 1.0).abs() < 1e-6);
        let disjoint = LabelMap2D::from_mask(16, 16, |x, _| x >= 12).unwrap();
        assert!(dice_loss(&a, &disjoint).unwrap().abs() < 1e-6);
        // Oracle by pixel counting: two 8x8 squares sharing a 4x8 strip,
        // 2 * 32 / (64 + 64) = 0.5.
        let b = LabelMap2D::from_mask(16, 16, |x, y| (6..14).contains(&x) && (4..12).contains(&y))
            .unwrap();
        let inter = (0..16 * 16)
            .filter(|&i| a.data()[i] == 1.0 && b.data()[i] == 1.0)
            .count() as f64;
        let expected = -2.0 * inter / (a.mass() + b.mass());
        assert_eq!(expected, -0.5);
        assert!((dice_loss(&a, &b).unwrap() - expected).abs() < 1e-6);
        let empty = LabelMap2D::zeros(16, 16).unwrap();
        assert_eq!(dice_loss(&empty, &empty).unwrap(), 0.0);
    }

    #[test]
    fn smoothness_anchors() {
        assert_eq!(
            smoothness_loss(&DisplacementField::constant(5, 4, 2.0, -1.0)),
            0.0
        );
        let shear = DisplacementField::from_fn(6, 6, |x, _| (x as f64, 0.0)).unwrap();
        // Every pixel but the last column contributes exactly 1.
        assert!((smoothness_loss(&shear) - 30.0 / 36.0).abs() < 1e-15);
    }

    #[test]
    fn smoothness_matches_direct_resummation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = DisplacementField::from_fn(6, 6, |_, _| {
            (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))
        })
        .unwrap();
        let mut brute = 0.0;
        for c in [f.dx(), f.dy()] {
            for y in 0..6 {
                for x in 0..5 {
                    brute += (c[y * 6 + x + 1] - c[y * 6 + x]).powi(2);
                }
            }
            for y in 0..5 {
                for x in 0..6 {
                    brute += (c[(y + 1) * 6 + x] - c[y * 6 + x]).powi(2);
                }
            }
        }
        assert!((smoothness_loss(&f) - brute / 36.0).abs() < 1e-12);
    }

    #[test]
    fn total_of_identical_pair_is_minus_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 12, 12);
        let lbl = LabelMap2D::from_mask(12, 12, |x, y| x > 3 && y > 4).unwrap();
        let pair = RegistrationPair::labeled(&img, &lbl, &img, &lbl);
        let l = total_loss(
            pair,
            &DisplacementField::zeros(12, 12),
            LossWeights::default(),
        )
        .unwrap();
        assert!((l.total + 2.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_weights_give_sim_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_image(&mut rng, 8, 8);
        let b = random_image(&mut rng, 8, 8);
        let f = DisplacementField::from_fn(8, 8, |_, _| {
            (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
        .unwrap();
        let l = total_loss(
            RegistrationPair::unlabeled(&a, &b),
            &f,
            LossWeights::new(1.0, 0.0, 0.0).unwrap(),
        )
        .unwrap();
        assert_eq!(l.total, l.sim);
    }

    #[test]
    fn total_recombines_independent_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_image(&mut rng, 8, 8);
        let b = random_image(&mut rng, 8, 8);
        let la = LabelMap2D::from_fn(8, 8, |_, _| rng.random_range(0.0..1.0)).unwrap();
        let lb = LabelMap2D::from_fn(8, 8, |_, _| rng.random_range(0.0..1.0)).unwrap();
        let f = DisplacementField::from_fn(8, 8, |_, _| {
            (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))
        })
        .unwrap();
        let w = LossWeights::new(0.7, 1.3, 0.05).unwrap();
        let l = total_loss(RegistrationPair::labeled(&a, &la, &b, &lb), &f, w).unwrap();
        let sim = ncc_loss(&crate::transform::warp(&a, &f).unwrap().warped, &b).unwrap();
        let dice = dice_loss(&crate::transform::warp(&la, &f).unwrap().warped, &lb).unwrap();
        let smooth = smoothness_loss(&f);
        assert!((l.sim - sim).abs() < 1e-12);
        assert!((l.dice - dice).abs() < 1e-12);
        assert!((l.smooth - smooth).abs() < 1e-12);
        assert!((l.total - (0.7 * sim + 1.3 * dice + 0.05 * smooth)).abs() < 1e-12);
    }

    #[test]
    fn smoothness_only_gradient_vanishes_on_constant_field() {
        let img = Image2D::from_fn(8, 8, |x, y| (x * y) as f64).unwrap();
        let g = total_loss_gradient(
            RegistrationPair::unlabeled(&img, &img),
            &DisplacementField::constant(8, 8, 0.4, -0.2),
            LossWeights::new(0.0, 0.0, 1.0).unwrap(),
        )
        .unwrap();
        assert!(g.dx().iter().chain(g.dy()).all(|&v| v == 0.0));
    }

    #[test]
    fn sim_gradient_vanishes_at_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let img = random_image(&mut rng, 10, 10);
        let g = total_loss_gradient(
            RegistrationPair::unlabeled(&img, &img),
            &DisplacementField::zeros(10, 10),
            LossWeights::new(1.0, 0.0, 0.0).unwrap(),
        )
        .unwrap();
        assert!(g.dx().iter().chain(g.dy()).all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn missing_target_label_disables_dice() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random_image(&mut rng, 8, 8);
        let b = random_image(&mut rng, 8, 8);
        let la = LabelMap2D::from_mask(8, 8, |x, _| x < 4).unwrap();
        let pair = RegistrationPair {
            atlas_image: &a,
            atlas_label: Some(&la),
            target_image: &b,
            target_label: None,
        };
        let obj = Objective::new(pair, LossWeights::default()).unwrap();
        assert_eq!(obj.effective_beta(), 0.0);
        let l = obj.loss(&DisplacementField::zeros(8, 8)).unwrap();
        assert_eq!(l.dice, 0.0);
    }

    #[test]
    fn rejects_invalid_weights_and_dims() {
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0, 0.0).is_err());
        let a = Image2D::from_fn(8, 8, |x, _| x as f64).unwrap();
        let b = Image2D::from_fn(8, 7, |x, _| x as f64).unwrap();
        assert!(matches!(
            total_loss(
                RegistrationPair::unlabeled(&a, &b),
                &DisplacementField::zeros(8, 8),
                LossWeights::default()
            ),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn ncc_is_bounded_symmetric_and_affine_invariant(
            a in prop::collection::vec(-1.0f64..1.0, 25),
            b in prop::collection::vec(-1.0f64..1.0, 25),
            scale in 0.1f64..10.0, shift in -5.0f64..5.0,
        ) {
            let x = Image2D::new(5, 5, a).unwrap();
            let y = Image2D::new(5, 5, b).unwrap();
            let v = ncc_loss(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&v));
            prop_assert!((v - ncc_loss(&y, &x).unwrap()).abs() < 1e-12);
            let ys = Image2D::new(5, 5, y.data().iter().map(|t| scale * t + shift).collect()).unwrap();
            prop_assert!((v - ncc_loss(&x, &ys).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn dice_is_bounded_and_symmetric(
            a in prop::collection::vec(0.0f64..=1.0, 25),
            b in prop::collection::vec(0.0f64..=1.0, 25),
        ) {
            let x = LabelMap2D::new(5, 5, a).unwrap();
            let y = LabelMap2D::new(5, 5, b).unwrap();
            let v = dice_loss(&x, &y).unwrap();
            prop_assert!((-1.0..=0.0).contains(&v));
            prop_assert_eq!(v, dice_loss(&y, &x).unwrap());
        }

        #[test]
        fn smoothness_nonnegative_and_zero_only_when_constant(f in prop::collection::vec(-3.0f64..3.0, 32)) {
            let field = DisplacementField::new(4, 4, f[..16].to_vec(), f[16..].to_vec()).unwrap();
            let s = smoothness_loss(&field);
            prop_assert!(s >= 0.0);
            let constant = field.dx().iter().all(|&v| v == field.dx()[0]) && field.dy().iter().all(|&v| v == field.dy()[0]);
            prop_assert_eq!(s == 0.0, constant);
        }
    }
}
