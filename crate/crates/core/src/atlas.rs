//! Atlas sets, image descriptors and nearest-atlas selection.
//!
//! Each image is summarized by a 71-value descriptor: a 64-bin intensity
//! histogram over the image's own min..max range (mass-normalized) followed by
//! seven moments (mean, variance, skewness, kurtosis, centroid x, centroid y,
//! radial second moment). Descriptors are compared by Euclidean distance after
//! z-scoring every dimension with statistics taken over the atlas set.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{normalize, row_major_sum, Image2D, LabelMap2D, Raster};

pub const HISTOGRAM_BINS: usize = 64;
pub const FEATURE_LEN: usize = HISTOGRAM_BINS + 7;

/// Default number of atlases fused per target.
pub const DEFAULT_ATLAS_COUNT: usize = 6;

pub fn extract_features(img: &Image2D) -> Result<Vec<f64>> {
    if img.is_constant() {
        return Err(Error::ConstantImage);
    }
    let (w, h) = img.dims();
    let n = (w * h) as f64;
    let data = img.data();
    let (lo, hi) = img.min_max();
    let span = hi - lo;

    let mut features = vec![0.0; FEATURE_LEN];
    for &v in data {
        let bin = (((v - lo) / span) * HISTOGRAM_BINS as f64).floor() as usize;
        features[bin.min(HISTOGRAM_BINS - 1)] += 1.0;
    }
    for f in &mut features[..HISTOGRAM_BINS] {
        *f /= n;
    }

    let mean = row_major_sum(w, h, |i| data[i]) / n;
    let central = |p: i32| row_major_sum(w, h, |i| (data[i] - mean).powi(p)) / n;
    let var = central(2);
    let std = var.sqrt();
    let skew = central(3) / (std * std * std);
    let kurt = central(4) / (var * var);

    // Spatial moments weight each pixel by its height above the minimum.
    let weight = |i: usize| data[i] - lo;
    let mass = row_major_sum(w, h, weight);
    let cx = row_major_sum(w, h, |i| weight(i) * (i % w) as f64) / mass;
    let cy = row_major_sum(w, h, |i| weight(i) * (i / w) as f64) / mass;
    let radial = row_major_sum(w, h, |i| {
        let (dx, dy) = ((i % w) as f64 - cx, (i / w) as f64 - cy);
        weight(i) * (dx * dx + dy * dy)
    }) / mass;

    features[HISTOGRAM_BINS..].copy_from_slice(&[mean, var, skew, kurt, cx, cy, radial]);
    Ok(features)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtlasEntry {
    id: String,
    image: Image2D,
    label: LabelMap2D,
    features: Vec<f64>,
}

impl AtlasEntry {
    /// Normalizes `image` and computes its descriptor. `label` must be binary.
    pub fn new(id: impl Into<String>, image: Image2D, label: LabelMap2D) -> Result<Self> {
        let id = id.into();
        if image.dims() != label.dims() {
            return Err(Error::DimensionMismatch {
                expected: image.dims(),
                actual: label.dims(),
            });
        }
        if !label.is_binary() {
            return Err(Error::InvalidData(format!(
                "atlas {id}: label is not binary"
            )));
        }
        let image = normalize(&image)?;
        let features = extract_features(&image)?;
        Ok(Self {
            id,
            image,
            label,
            features,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn image(&self) -> &Image2D {
        &self.image
    }

    pub fn label(&self) -> &LabelMap2D {
        &self.label
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }
}

/// Per-dimension z-scoring fitted on an atlas set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl FeatureScaler {
    /// Fits population mean and standard deviation per dimension. Dimensions
    /// with zero spread keep unit scale.
    pub fn fit<'a>(vectors: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let vectors: Vec<&[f64]> = vectors.into_iter().collect();
        let first = vectors
            .first()
            .ok_or_else(|| Error::InvalidData("no feature vectors".into()))?;
        let len = first.len();
        if let Some(v) = vectors.iter().find(|v| v.len() != len) {
            return Err(Error::LengthMismatch(len, v.len()));
        }
        let n = vectors.len() as f64;
        let mut mean = vec![0.0; len];
        let mut scale = vec![0.0; len];
        for d in 0..len {
            mean[d] = vectors.iter().map(|v| v[d]).sum::<f64>() / n;
            let var = vectors
                .iter()
                .map(|v| (v[d] - mean[d]).powi(2))
                .sum::<f64>()
                / n;
            scale[d] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, scale })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Euclidean distance between z-scored vectors.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::LengthMismatch(a.len(), b.len()));
        }
        if a.len() != self.len() {
            return Err(Error::LengthMismatch(self.len(), a.len()));
        }
        // The mean cancels in the difference; only the scale matters.
        Ok(a.iter()
            .zip(b)
            .zip(&self.scale)
            .map(|((x, y), s)| ((x - y) / s).powi(2))
            .sum::<f64>()
            .sqrt())
    }

    pub fn transform(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// Distance between two descriptors under the set's z-scoring.
pub fn feature_distance(set: &AtlasSet, a: &[f64], b: &[f64]) -> Result<f64> {
    set.scaler().distance(a, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtlasSet {
    entries: Vec<AtlasEntry>,
    scaler: FeatureScaler,
}

impl AtlasSet {
    pub fn new(entries: Vec<AtlasEntry>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::InvalidParams(format!(
                "an atlas set needs at least 2 entries, got {}",
                entries.len()
            )));
        }
        let dims = entries[0].image.dims();
        let mut ids = HashSet::new();
        for e in &entries {
            if e.image.dims() != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    actual: e.image.dims(),
                });
            }
            if !ids.insert(e.id.as_str()) {
                return Err(Error::InvalidData(format!("duplicate atlas id {}", e.id)));
            }
        }
        let scaler = FeatureScaler::fit(entries.iter().map(|e| e.features.as_slice()))?;
        Ok(Self { entries, scaler })
    }

    pub fn entries(&self) -> &[AtlasEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.entries[0].image.dims()
    }

    pub fn get(&self, id: &str) -> Option<&AtlasEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn scaler(&self) -> &FeatureScaler {
        &self.scaler
    }

    /// Entries with the given ids, in the order given.
    pub fn subset(&self, ids: &[String]) -> Result<Vec<&AtlasEntry>> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .ok_or_else(|| Error::InvalidData(format!("unknown atlas id {id}")))
            })
            .collect()
    }

    /// A new set holding only `ids`. Feature statistics are refitted.
    pub fn restricted(&self, ids: &[String]) -> Result<AtlasSet> {
        AtlasSet::new(self.subset(ids)?.into_iter().cloned().collect())
    }

    /// All `(id, distance)` pairs in ascending distance, ties by id.
    pub fn ranked(&self, target_features: &[f64]) -> Result<Vec<(String, f64)>> {
        let mut ranked = self
            .entries
            .iter()
            .map(|e| {
                Ok((
                    e.id.clone(),
                    self.scaler.distance(target_features, &e.features)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        Ok(ranked)
    }
}

/// Ids of the `n` atlases closest to the target descriptor.
pub fn select_atlases(target_features: &[f64], set: &AtlasSet, n: usize) -> Result<Vec<String>> {
    if n == 0 || n > set.len() {
        return Err(Error::NOutOfRange {
            n,
            available: set.len(),
        });
    }
    Ok(set
        .ranked(target_features)?
        .into_iter()
        .take(n)
        .map(|(id, _)| id)
        .collect())
}

/// One row of an atlas manifest. Paths are resolved relative to the
/// manifest file and may name a single `.oasg` slice or a volume directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let entries: Vec<ManifestEntry> = serde_json::from_slice(&std::fs::read(path)?)?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    Ok(entries
        .into_iter()
        .map(|e| ManifestEntry {
            id: e.id,
            image: base.join(e.image),
            label: base.join(e.label),
        })
        .collect())
}
