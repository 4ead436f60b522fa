//! Pairwise deformable registration by direct first-order optimization of a
//! dense displacement field.
//!
//! The field starts at zero on the coarsest level of a 2x image pyramid and is
//! refined with Adam on the analytic gradient of the weighted objective. Between
//! levels the field is bilinearly upsampled and its displacements doubled. Each
//! level keeps the lowest-loss iterate it visits, and the finest level starts
//! from the better of the upsampled field and the zero field, so the returned
//! field never scores worse than no deformation.

mod adam;
mod pyramid;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DisplacementField, Image2D, LabelMap2D, Raster};
use crate::losses::{LossBreakdown, LossWeights, Objective, RegistrationPair};
use adam::Adam;
use pyramid::{downsample, upsample_field, usable_levels};

/// Iterations compared by the convergence test.
pub const CONVERGENCE_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub weights: LossWeights,
    /// Adam step size in pixels.
    pub learning_rate: f64,
    /// Iteration cap per pyramid level.
    pub max_iters: usize,
    pub pyramid_levels: usize,
    /// A level stops once the total loss improves by less than this fraction
    /// over [`CONVERGENCE_WINDOW`] iterations.
    pub convergence_tol: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Recorded for provenance; the optimizer itself draws no random numbers.
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            learning_rate: 0.05,
            max_iters: 300,
            pyramid_levels: 3,
            convergence_tol: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let positive = [self.learning_rate, self.convergence_tol, self.adam_eps];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParams(
                "learning_rate, convergence_tol and adam_eps must be positive".into(),
            ));
        }
        if self.max_iters == 0 || self.pyramid_levels == 0 {
            return Err(Error::InvalidParams(
                "max_iters and pyramid_levels must be >= 1".into(),
            ));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidParams(format!(
                    "Adam decay rate {b} outside [0, 1)"
                )));
            }
        }
        Ok(())
    }

    pub fn with_weights(mut self, weights: LossWeights) -> Self {
        self.weights = weights;
        self
    }
}

/// Loss of one evaluated iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// 0 is the finest level.
    pub level: usize,
    pub iteration: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub width: usize,
    pub height: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Set when a non-finite loss forced a restart at half the step size.
    pub restarted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub field: DisplacementField,
    /// Full-resolution loss of the zero field.
    pub initial: LossBreakdown,
    /// Full-resolution loss of `field`; never above `initial.total`.
    pub final_loss: LossBreakdown,
    /// Every evaluated iterate, coarsest level first.
    pub loss_trace: Vec<TraceEntry>,
    pub levels: Vec<LevelReport>,
    /// Whether the finest level met the convergence test before `max_iters`.
    pub converged: bool,
}

impl RegistrationResult {
    /// Trace entries of the finest level.
    pub fn finest_trace(&self) -> impl Iterator<Item = &LossBreakdown> {
        self.loss_trace
            .iter()
            .filter(|e| e.level == 0)
            .map(|e| &e.loss)
    }
}

struct LevelInputs {
    atlas_image: Image2D,
    atlas_label: Option<LabelMap2D>,
    target_image: Image2D,
    target_label: Option<LabelMap2D>,
}

impl LevelInputs {
    fn pair(&self) -> RegistrationPair<'_> {
        RegistrationPair {
            atlas_image: &self.atlas_image,
            atlas_label: self.atlas_label.as_ref(),
            target_image: &self.target_image,
            target_label: self.target_label.as_ref(),
        }
    }

    fn downsampled(&self) -> Self {
        Self {
            atlas_image: downsample(&self.atlas_image),
            atlas_label: self.atlas_label.as_ref().map(downsample),
            target_image: downsample(&self.target_image),
            target_label: self.target_label.as_ref().map(downsample),
        }
    }
}

struct LevelOutcome {
    field: DisplacementField,
    best: LossBreakdown,
    report: LevelReport,
}

fn optimize_level(
    objective: &Objective<'_>,
    init: DisplacementField,
    level: usize,
    cfg: &RegistrationConfig,
    trace: &mut Vec<TraceEntry>,
) -> Result<LevelOutcome> {
    let (w, h) = init.dims();
    let trace_start = trace.len();
    let mut lr = cfg.learning_rate;
    let mut restarted = false;

    'attempt: loop {
        trace.truncate(trace_start);
        let mut field = init.clone();
        let mut adam = Adam::new(2 * w * h, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        let mut params = vec![0.0; 2 * w * h];
        let mut grads = vec![0.0; 2 * w * h];
        let mut best: Option<(LossBreakdown, DisplacementField)> = None;
        let mut converged = false;
        let mut iterations = 0;

        for iteration in 0..=cfg.max_iters {
            // The final pass only scores the last update.
            let scoring_only = iteration == cfg.max_iters;
            let (loss, grad) = if scoring_only {
                (objective.loss(&field)?, None)
            } else {
                let (l, g) = objective.loss_and_gradient(&field)?;
                (l, Some(g))
            };
            if !loss.total.is_finite() || grad.as_ref().is_some_and(|g| !g.is_finite()) {
                if restarted {
                    let losses = trace.iter().map(|e| e.loss).collect();
                    return Err(Error::NonFiniteLoss {
                        level,
                        iteration,
                        trace: losses,
                    });
                }
                restarted = true;
                lr *= 0.5;
                continue 'attempt;
            }
            trace.push(TraceEntry {
                level,
                iteration,
                loss,
            });
            if best.as_ref().is_none_or(|(b, _)| loss.total < b.total) {
                best = Some((loss, field.clone()));
            }
            let level_trace = &trace[trace_start..];
            if level_trace.len() > CONVERGENCE_WINDOW {
                let prev = level_trace[level_trace.len() - 1 - CONVERGENCE_WINDOW]
                    .loss
                    .total;
                let rel = (prev - loss.total) / prev.abs().max(1e-12);
                if rel < cfg.convergence_tol {
                    converged = true;
                    break;
                }
            }
            let Some(grad) = grad else { break };
            iterations += 1;

            let n = w * h;
            params[..n].copy_from_slice(field.dx());
            params[n..].copy_from_slice(field.dy());
            grads[..n].copy_from_slice(grad.dx());
            grads[n..].copy_from_slice(grad.dy());
            adam.step(&mut params, &grads);
            let (dx, dy) = field.components_mut();
            dx.copy_from_slice(&params[..n]);
            dy.copy_from_slice(&params[n..]);
        }

        let (best_loss, best_field) = best.expect("at least one iterate is scored");
        return Ok(LevelOutcome {
            field: best_field,
            best: best_loss,
            report: LevelReport {
                level,
                width: w,
                height: h,
                iterations,
                converged,
                restarted,
            },
        });
    }
}

/// Registers an atlas to a target by minimizing the weighted objective.
///
/// The Dice term participates only when both labels are supplied; otherwise
/// the effective `beta` is zero.
pub fn register_pair(
    atlas_image: &Image2D,
    atlas_label: Option<&LabelMap2D>,
    target_image: &Image2D,
    target_label: Option<&LabelMap2D>,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    let full = RegistrationPair {
        atlas_image,
        atlas_label,
        target_image,
        target_label,
    };
    let full_objective = Objective::new(full, cfg.weights)?;
    let (w, h) = full.dims();
    let zero = DisplacementField::zeros(w, h);
    let initial = full_objective.loss(&zero)?;

    let levels = usable_levels(w, h, cfg.pyramid_levels);
    let mut pyramid = vec![LevelInputs {
        atlas_image: atlas_image.clone(),
        atlas_label: atlas_label.cloned(),
        target_image: target_image.clone(),
        target_label: target_label.cloned(),
    }];
    for _ in 1..levels {
        let next = pyramid.last().unwrap().downsampled();
        pyramid.push(next);
    }

    let mut trace = Vec::new();
    let mut reports = Vec::with_capacity(levels);
    let mut field: Option<DisplacementField> = None;
    let mut finest_best = initial;
    for level in (0..levels).rev() {
        let inputs = &pyramid[level];
        let (lw, lh) = inputs.target_image.dims();
        let objective = if level == 0 {
            None
        } else {
            Some(Objective::new(inputs.pair(), cfg.weights)?)
        };
        let objective = objective.as_ref().unwrap_or(&full_objective);
        let mut init = match field.take() {
            Some(coarse) => upsample_field(&coarse, lw, lh),
            None => DisplacementField::zeros(lw, lh),
        };
        if level == 0 && objective.loss(&init)?.total > initial.total {
            init = DisplacementField::zeros(lw, lh);
        }
        let outcome = optimize_level(objective, init, level, cfg, &mut trace)?;
        if level == 0 {
            finest_best = outcome.best;
        }
        reports.push(outcome.report);
        field = Some(outcome.field);
    }

    let mut field = field.expect("at least one level");
    let mut final_loss = finest_best;
    if final_loss.total > initial.total {
        field = zero;
        final_loss = initial;
    }
    let converged = reports.last().is_some_and(|r| r.converged);
    Ok(RegistrationResult {
        field,
        initial,
        final_loss,
        loss_trace: trace,
        levels: reports,
        converged,
    })
}

/// Test-time registration: no target label exists, so the Dice term is off.
pub fn register_to_test(
    atlas_image: &Image2D,
    target_image: &Image2D,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    register_pair(atlas_image, None, target_image, None, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::normalize;
    use crate::transform::warp_values;

    fn blob_image(w: usize, h: usize, cx: f64, cy: f64) -> Image2D {
        let img = Image2D::from_fn(w, h, |x, y| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            (-(dx * dx + dy * dy) / 40.0).exp() + 0.3 * (dx * 0.4).sin() * (dy * 0.3).cos()
        })
        .unwrap();
        normalize(&img).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(RegistrationConfig::default().validate().is_ok());
        let bad = RegistrationConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RegistrationConfig {
            adam_beta1: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json_uses_field_names() {
        let json = r#"{"weights":{"alpha":1.0,"beta":0.5,"gamma":0.02},"learning_rate":0.1,"max_iters":50,
            "pyramid_levels":2,"convergence_tol":1e-4,"adam_beta1":0.8,"adam_beta2":0.99,"adam_eps":1e-7,"seed":9}"#;
        let cfg: RegistrationConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.max_iters, 50);
        assert_eq!(cfg.weights.beta, 0.5);
        assert!(serde_json::from_str::<RegistrationConfig>(r#"{"learning_rate_typo":1}"#).is_err());
        let partial: RegistrationConfig = serde_json::from_str(r#"{"seed":4}"#).unwrap();
        assert_eq!(
            partial,
            RegistrationConfig {
                seed: 4,
                ..Default::default()
            }
        );
    }

    #[test]
    fn self_registration_stays_at_identity() {
        let img = blob_image(32, 32, 15.0, 16.0);
        let r = register_to_test(&img, &img, &RegistrationConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.field.max_abs() < 0.1);
        assert!((r.final_loss.total - r.initial.total).abs() < 1e-3);
    }

    #[test]
    fn recovers_a_translation() {
        let atlas = blob_image(32, 32, 13.0, 16.0);
        let target = blob_image(32, 32, 16.0, 15.0);
        let r = register_to_test(&atlas, &target, &RegistrationConfig::default()).unwrap();
        assert!(r.final_loss.total < r.initial.total);
        assert!(r.final_loss.sim < -0.97, "sim {}", r.final_loss.sim);
        // Target blob at (16, 15) pulls from the atlas blob at (13, 16).
        let (u, v) = r.field.at(16, 15);
        assert!(
            (u + 3.0).abs() < 0.75 && (v - 1.0).abs() < 0.75,
            "({u}, {v})"
        );
        let warped = warp_values(&atlas, &r.field).unwrap();
        assert!(crate::losses::ncc_loss(&warped, &target).unwrap() < -0.97);
    }

    #[test]
    fn smoothness_only_objective_keeps_zero_field() {
        let atlas = blob_image(24, 24, 10.0, 12.0);
        let target = blob_image(24, 24, 13.0, 12.0);
        let cfg =
            RegistrationConfig::default().with_weights(LossWeights::new(0.0, 1.0, 0.1).unwrap());
        let r = register_to_test(&atlas, &target, &cfg).unwrap();
        assert_eq!(r.field.max_abs(), 0.0);
    }

    #[test]
    fn deterministic() {
        let atlas = blob_image(24, 24, 10.0, 12.0);
        let target = blob_image(24, 24, 12.0, 11.0);
        let cfg = RegistrationConfig::default();
        let a = register_to_test(&atlas, &target, &cfg).unwrap();
        let b = register_to_test(&atlas, &target, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trace_levels_run_coarse_to_fine() {
        let atlas = blob_image(32, 32, 13.0, 16.0);
        let target = blob_image(32, 32, 15.0, 16.0);
        let r = register_to_test(&atlas, &target, &RegistrationConfig::default()).unwrap();
        assert_eq!(
            r.levels.iter().map(|l| l.level).collect::<Vec<_>>(),
            vec![2, 1, 0]
        );
        assert_eq!(r.levels[0].width, 8);
        assert!(r.loss_trace.windows(2).all(|p| p[0].level >= p[1].level));
        assert!(r.final_loss.total <= r.initial.total);
    }
}
