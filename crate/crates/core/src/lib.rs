//! Multi-atlas segmentation by label-constrained deformable registration and
//! label-overlap weighted fusion.
//!
//! The pipeline, bottom-up:
//!
//! * [`grid`]: images, soft labels, displacement fields, volumes, OASG files.
//! * [`transform`]: backward bilinear warping and its per-pixel derivative.
//! * [`losses`]: NCC, soft Dice and smoothness terms with analytic gradients.
//! * [`registration`]: multi-resolution Adam descent on a dense field.
//! * [`atlas`]: atlas sets, hand-crafted features, nearest-atlas selection.
//! * [`fusion`]: overlap-based atlas weights, baselines, and `segment`.
//! * [`metrics`]: DSC, aRVD and Hausdorff distance over apex/base/whole.
//! * [`phantom`]: seeded synthetic cohorts with known deformations.
//! * [`experiment`]: strategy-by-atlas-count ablation over a cohort.

pub mod atlas;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod parallel;
pub mod phantom;
pub mod registration;
pub mod transform;

pub use error::{Error, Result};
