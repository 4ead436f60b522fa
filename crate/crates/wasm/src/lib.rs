//! Browser bindings for the interactive demo in `www/`.
//!
//! Everything runs on a single synthetic slice so each call finishes in a
//! second or two on the page's main thread. Seeds are `u32` so JavaScript can
//! pass plain numbers.

use atlasfuse::fusion::{binary_dice, segment as segment_slice, Strategy};
use atlasfuse::grid::{normalize, threshold, DisplacementField, Image2D, LabelMap2D, Raster};
use atlasfuse::losses::{total_loss, LossWeights, RegistrationPair};
use atlasfuse::phantom::{generate_cohort, PhantomParams};
use atlasfuse::registration::{register_pair, RegistrationConfig};
use atlasfuse::transform::warp_values;
use wasm_bindgen::prelude::*;

fn js(e: atlasfuse::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn demo_params(size: usize, seed: u64, deform_max: f64) -> PhantomParams {
    PhantomParams {
        width: size,
        height: size,
        slices: 1,
        deform_max,
        seed,
        ..Default::default()
    }
}

/// One atlas and one target slice from a seeded phantom.
#[wasm_bindgen]
pub struct PairDemo {
    size: usize,
    atlas: Image2D,
    atlas_label: LabelMap2D,
    target: Image2D,
    target_label: LabelMap2D,
    field: DisplacementField,
}

/// Result of one registration run. Images are row-major `size * size`.
#[wasm_bindgen(getter_with_clone)]
pub struct RegistrationView {
    pub warped_image: Vec<f64>,
    pub warped_label: Vec<f64>,
    /// Displacement magnitude per pixel.
    pub magnitude: Vec<f64>,
    /// Total loss per iteration, finest level.
    pub trace: Vec<f64>,
    pub dice_before: f64,
    pub dice_after: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub iterations: usize,
}

#[wasm_bindgen]
impl PairDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize, deform_max: f64) -> Result<PairDemo, JsError> {
        let cohort =
            generate_cohort(&demo_params(size, seed.into(), deform_max), 2, 1).map_err(js)?;
        let (a, t) = (&cohort.atlases[0].1, &cohort.tests[0].1);
        Ok(PairDemo {
            size,
            atlas: normalize(a.image.slice(0)).map_err(js)?,
            atlas_label: a.label.slice(0).clone(),
            target: normalize(t.image.slice(0)).map_err(js)?,
            target_label: t.label.slice(0).clone(),
            field: DisplacementField::zeros(size, size),
        })
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    #[wasm_bindgen(getter)]
    pub fn atlas_image(&self) -> Vec<f64> {
        self.atlas.data().to_vec()
    }

    #[wasm_bindgen(getter)]
    pub fn atlas_label(&self) -> Vec<f64> {
        self.atlas_label.data().to_vec()
    }

    #[wasm_bindgen(getter)]
    pub fn target_image(&self) -> Vec<f64> {
        self.target.data().to_vec()
    }

    #[wasm_bindgen(getter)]
    pub fn target_label(&self) -> Vec<f64> {
        self.target_label.data().to_vec()
    }

    /// Registers the atlas to the target. With `use_labels` the Dice term
    /// sees both labels; otherwise only intensities drive the fit.
    pub fn register(
        &mut self,
        alpha: f64,
        beta: f64,
        gamma: f64,
        max_iters: usize,
        use_labels: bool,
    ) -> Result<RegistrationView, JsError> {
        let weights = LossWeights::new(alpha, beta, gamma).map_err(js)?;
        let cfg = RegistrationConfig {
            max_iters,
            ..Default::default()
        }
        .with_weights(weights);
        let (al, tl) = if use_labels {
            (Some(&self.atlas_label), Some(&self.target_label))
        } else {
            (None, None)
        };
        let reg = register_pair(&self.atlas, al, &self.target, tl, &cfg).map_err(js)?;
        let warped_label = warp_values(&self.atlas_label, &reg.field).map_err(js)?;
        let binary = threshold(&warped_label, 0.5).map_err(js)?;
        let view = RegistrationView {
            warped_image: warp_values(&self.atlas, &reg.field)
                .map_err(js)?
                .data()
                .to_vec(),
            warped_label: warped_label.data().to_vec(),
            magnitude: reg
                .field
                .dx()
                .iter()
                .zip(reg.field.dy())
                .map(|(x, y)| x.hypot(*y))
                .collect(),
            trace: reg.finest_trace().map(|l| l.total).collect(),
            dice_before: binary_dice(&self.atlas_label, &self.target_label).map_err(js)?,
            dice_after: binary_dice(&binary, &self.target_label).map_err(js)?,
            loss_before: reg.initial.total,
            loss_after: reg.final_loss.total,
            iterations: reg.levels.iter().map(|l| l.iterations).sum(),
        };
        self.field = reg.field;
        Ok(view)
    }

    /// Loss terms along the straight path from no deformation (t = 0) to
    /// the last registered field (t = 1) and beyond. Returns rows of
    /// `[t, sim, dice, smooth, total]`, flattened.
    pub fn loss_profile(
        &self,
        alpha: f64,
        beta: f64,
        gamma: f64,
        steps: usize,
        t_max: f64,
    ) -> Result<Vec<f64>, JsError> {
        let weights = LossWeights::new(alpha, beta, gamma).map_err(js)?;
        let pair = RegistrationPair::labeled(
            &self.atlas,
            &self.atlas_label,
            &self.target,
            &self.target_label,
        );
        let steps = steps.max(2);
        let mut out = Vec::with_capacity(steps * 5);
        for i in 0..steps {
            let t = t_max * i as f64 / (steps - 1) as f64;
            let l = total_loss(pair, &self.field.scaled(t), weights).map_err(js)?;
            out.extend([t, l.sim, l.dice, l.smooth, l.total]);
        }
        Ok(out)
    }
}

#[wasm_bindgen(getter_with_clone)]
pub struct SegmentationView {
    pub test_image: Vec<f64>,
    pub truth: Vec<f64>,
    pub label: Vec<f64>,
    pub soft: Vec<f64>,
    /// Selected atlas ids, nearest first.
    pub selected: Vec<String>,
    /// Fusion weights aligned with `selected`.
    pub weights: Vec<f64>,
    pub dice: f64,
}

/// Segments a fresh test slice against `atlases` seeded atlases using the
/// `n` nearest of them.
#[wasm_bindgen]
pub fn segment(
    seed: u32,
    size: usize,
    atlases: usize,
    n: usize,
    strategy: &str,
    max_iters: usize,
) -> Result<SegmentationView, JsError> {
    let strategy: Strategy = strategy.parse().map_err(js)?;
    let cohort = generate_cohort(&demo_params(size, seed.into(), 4.0), atlases, 1).map_err(js)?;
    let set = cohort.atlas_set(0).map_err(js)?;
    let test = &cohort.tests[0].1;
    let cfg = RegistrationConfig {
        max_iters,
        ..Default::default()
    };
    let seg = segment_slice(test.image.slice(0), &set, &cfg, strategy, n).map_err(js)?;
    Ok(SegmentationView {
        test_image: normalize(test.image.slice(0)).map_err(js)?.data().to_vec(),
        truth: test.label.slice(0).data().to_vec(),
        label: seg.label.data().to_vec(),
        soft: seg.soft.data().to_vec(),
        weights: seg
            .selected
            .iter()
            .map(|id| seg.weights.get(id).unwrap_or(0.0))
            .collect(),
        selected: seg.selected,
        dice: binary_dice(&seg.label, test.label.slice(0)).map_err(js)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_improves_overlap() {
        let mut demo = PairDemo::new(3, 64, 4.0).unwrap();
        let view = demo.register(1.0, 1.0, 0.01, 150, true).unwrap();
        assert!(view.dice_after > view.dice_before);
        assert_eq!(view.magnitude.len(), 64 * 64);
        let profile = demo.loss_profile(1.0, 1.0, 0.01, 5, 1.0).unwrap();
        assert_eq!(profile.len(), 25);
        // t = 0 is the zero field, t = 1 the registered one.
        assert!(profile[24] <= profile[4]);
    }

    #[test]
    fn segmentation_weights_match_selection() {
        let view = segment(5, 64, 5, 3, "oasis", 80).unwrap();
        assert_eq!(view.selected.len(), 3);
        assert!((view.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(view.dice > 0.7);
    }
}
