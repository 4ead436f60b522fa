//! Atlas weighting and label fusion.
//!
//! OASIS weights come from the label-overlap (LOA) matrix of the selected
//! atlases: `o[j][k]` is the Dice of atlas `k`'s label, registered onto atlas
//! `j` with the label constraint, against atlas `j`'s own label. The column
//! mean over `j != k` scores how well atlas `k` predicts the others. At test
//! time that prior is multiplied by each warped label's soft-Dice agreement
//! with the other warped labels and renormalized.
//!
//! The two baselines weight atlases by image similarity, `(1 + ncc) / 2`:
//! FwoW fuses the unwarped labels using the unwarped images, FWAL fuses the
//! warped labels using the warped images.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::atlas::{extract_features, select_atlases, AtlasEntry, AtlasSet, DEFAULT_ATLAS_COUNT};
use crate::error::{Error, Result};
use crate::grid::{ensure_same_dims, normalize, threshold, Image2D, LabelMap2D, Raster};
use crate::losses::{dice_loss, ncc_loss};
use crate::registration::{register_pair, register_to_test, RegistrationConfig};
use crate::transform::warp_values;

/// Fused maps are binarized at this level.
pub const FUSION_THRESHOLD: f64 = 0.5;

/// Hard Dice of two maps binarized at 0.5. Two empty maps agree perfectly.
pub fn binary_dice(a: &LabelMap2D, b: &LabelMap2D) -> Result<f64> {
    ensure_same_dims(a.dims(), b.dims())?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (fa, fb) = (*x >= 0.5, *y >= 0.5);
        na += fa as usize;
        nb += fb as usize;
        inter += (fa && fb) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairFailure {
    pub target: String,
    pub atlas: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoaMatrix {
    ids: Vec<String>,
    o: Vec<Vec<f64>>,
    failures: Vec<PairFailure>,
}

impl LoaMatrix {
    /// Validates shape and range. The diagonal is forced to 1.
    pub fn new(ids: Vec<String>, mut o: Vec<Vec<f64>>) -> Result<Self> {
        let n = ids.len();
        if n < 2 {
            return Err(Error::InvalidData(format!(
                "LOA matrix needs at least 2 atlases, got {n}"
            )));
        }
        if o.len() != n || o.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidData(format!("LOA matrix must be {n}x{n}")));
        }
        if o.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidData("LOA entries must lie in [0, 1]".into()));
        }
        for (j, row) in o.iter_mut().enumerate() {
            row[j] = 1.0;
        }
        Ok(Self {
            ids,
            o,
            failures: Vec::new(),
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `o[j][k]`: atlas `k` warped onto atlas `j`.
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.o[j][k]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.o
    }

    /// Pairs whose registration failed; their entries are 0.
    pub fn failures(&self) -> &[PairFailure] {
        &self.failures
    }

    fn index(&self, id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::InvalidData(format!("atlas {id} not in LOA matrix")))
    }

    /// The sub-matrix over `ids`, in the order given. Entries are pairwise, so
    /// this equals recomputing the matrix on that subset.
    pub fn restrict(&self, ids: &[String]) -> Result<LoaMatrix> {
        let idx = ids
            .iter()
            .map(|id| self.index(id))
            .collect::<Result<Vec<_>>>()?;
        let o = idx
            .iter()
            .map(|&j| idx.iter().map(|&k| self.o[j][k]).collect())
            .collect();
        let failures = self
            .failures
            .iter()
            .filter(|f| ids.contains(&f.target) && ids.contains(&f.atlas))
            .cloned()
            .collect();
        Ok(LoaMatrix {
            ids: ids.to_vec(),
            o,
            failures,
        })
    }

    /// CSV with a header row and a leading column of atlas ids.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(std::iter::once("id").chain(self.ids.iter().map(String::as_str)))
            .map_err(csv_error)?;
        for (id, row) in self.ids.iter().zip(&self.o) {
            w.write_record(std::iter::once(id.clone()).chain(row.iter().map(|v| v.to_string())))
                .map_err(csv_error)?;
        }
        w.into_inner()
            .map_err(|e| Error::InvalidData(e.to_string()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(bytes);
        let header = r.headers().map_err(csv_error)?.clone();
        let ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut o = Vec::new();
        for (j, record) in r.records().enumerate() {
            let record = record.map_err(csv_error)?;
            if ids.get(j).map(String::as_str) != record.get(0) {
                return Err(Error::InvalidData(format!(
                    "LOA row {j} id does not match the header"
                )));
            }
            let row = record
                .iter()
                .skip(1)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::InvalidData(format!("LOA value {v:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            o.push(row);
        }
        LoaMatrix::new(ids, o)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_csv()?)
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidData(format!("csv: {e}"))
}

/// Overlap of atlas `atlas`'s label registered onto atlas `target`.
pub fn pair_overlap(
    target: &AtlasEntry,
    atlas: &AtlasEntry,
    cfg: &RegistrationConfig,
) -> Result<f64> {
    let reg = register_pair(
        atlas.image(),
        Some(atlas.label()),
        target.image(),
        Some(target.label()),
        cfg,
    )?;
    let warped = threshold(&warp_values(atlas.label(), &reg.field)?, FUSION_THRESHOLD)?;
    binary_dice(&warped, target.label())
}

/// Registers every ordered pair of distinct atlases with the label
/// constraint. A failed pair scores 0 and is listed in `failures`.
pub fn compute_loa_matrix(set: &AtlasSet, cfg: &RegistrationConfig) -> Result<LoaMatrix> {
    cfg.validate()?;
    let entries = set.entries();
    let n = entries.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|j| (0..n).filter(move |&k| k != j).map(move |k| (j, k)))
        .collect();
    let scores = crate::parallel::map(&pairs, |&(j, k)| {
        pair_overlap(&entries[j], &entries[k], cfg)
    });
    let mut o = vec![vec![0.0; n]; n];
    let mut failures = Vec::new();
    for (&(j, k), score) in pairs.iter().zip(scores) {
        match score {
            Ok(v) => o[j][k] = v,
            Err(e) => failures.push(PairFailure {
                target: entries[j].id().to_string(),
                atlas: entries[k].id().to_string(),
                error: e.to_string(),
            }),
        }
    }
    let mut loa = LoaMatrix::new(entries.iter().map(|e| e.id().to_string()).collect(), o)?;
    loa.failures = failures;
    Ok(loa)
}

/// Normalized, nonnegative weights aligned with atlas ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    ids: Vec<String>,
    w: Vec<f64>,
}

impl FusionWeights {
    /// Normalizes raw nonnegative scores.
    pub fn from_raw(ids: Vec<String>, raw: Vec<f64>) -> Result<Self> {
        if ids.len() != raw.len() {
            return Err(Error::LengthMismatch(ids.len(), raw.len()));
        }
        if raw.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidData(
                "raw weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::AllZeroOverlap);
        }
        let w = raw.iter().map(|v| v / total).collect();
        Ok(Self { ids, w })
    }

    pub fn uniform(ids: Vec<String>) -> Result<Self> {
        let raw = vec![1.0; ids.len()];
        Self::from_raw(ids, raw)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.ids.iter().position(|x| x == id).map(|i| self.w[i])
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// `{"id": weight}`, keys sorted.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, f64> = self
            .ids
            .iter()
            .map(String::as_str)
            .zip(self.w.iter().copied())
            .collect();
        serde_json::to_value(map).expect("string keys")
    }
}

/// Column means of the LOA matrix over `j != k`, normalized.
pub fn atlas_weights_from_loa(loa: &LoaMatrix) -> Result<FusionWeights> {
    let n = loa.len();
    let raw = (0..n)
        .map(|k| {
            (0..n)
                .filter(|&j| j != k)
                .map(|j| loa.get(j, k))
                .sum::<f64>()
                / (n - 1) as f64
        })
        .collect();
    FusionWeights::from_raw(loa.ids.clone(), raw)
}

/// Soft Dice agreement between two maps.
pub fn soft_dice(a: &LabelMap2D, b: &LabelMap2D) -> Result<f64> {
    Ok(-dice_loss(a, b)?)
}

/// Refines `prior` with each warped label's mean soft-Dice agreement with
/// the other warped labels. `warped_labels` follows `prior`'s id order.
pub fn test_time_weights(
    warped_labels: &[LabelMap2D],
    prior: &FusionWeights,
) -> Result<FusionWeights> {
    let n = warped_labels.len();
    if n < 2 {
        return Err(Error::InvalidData(format!(
            "test-time weighting needs at least 2 labels, got {n}"
        )));
    }
    if n != prior.len() {
        return Err(Error::LengthMismatch(prior.len(), n));
    }
    let mut pairwise = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let d = soft_dice(&warped_labels[a], &warped_labels[b])?;
            pairwise[a][b] = d;
            pairwise[b][a] = d;
        }
    }
    let raw = (0..n)
        .map(|k| {
            let consensus = pairwise[k]
                .iter()
                .enumerate()
                .filter(|&(m, _)| m != k)
                .map(|(_, d)| d)
                .sum::<f64>()
                / (n - 1) as f64;
            prior.w[k] * consensus.max(0.0)
        })
        .collect();
    FusionWeights::from_raw(prior.ids.clone(), raw)
}

fn similarity_weights(
    ids: Vec<String>,
    images: &[&Image2D],
    test_img: &Image2D,
) -> Result<FusionWeights> {
    if ids.len() != images.len() {
        return Err(Error::LengthMismatch(ids.len(), images.len()));
    }
    let raw = images
        .iter()
        .map(|img| Ok(((1.0 - ncc_loss(img, test_img)?) / 2.0).clamp(0.0, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    FusionWeights::from_raw(ids, raw)
}

/// FwoW: similarity of each unwarped atlas image to the test image.
pub fn fwow_weights(entries: &[&AtlasEntry], test_img: &Image2D) -> Result<FusionWeights> {
    let ids = entries.iter().map(|e| e.id().to_string()).collect();
    let images: Vec<&Image2D> = entries.iter().map(|e| e.image()).collect();
    similarity_weights(ids, &images, test_img)
}

/// FWAL: similarity of each warped atlas image to the test image.
pub fn fwal_weights(
    ids: &[String],
    warped_images: &[Image2D],
    test_img: &Image2D,
) -> Result<FusionWeights> {
    let images: Vec<&Image2D> = warped_images.iter().collect();
    similarity_weights(ids.to_vec(), &images, test_img)
}

/// Pointwise weighted mean of the labels, clamped to the inputs' range.
pub fn fuse_labels(labels: &[LabelMap2D], weights: &FusionWeights) -> Result<LabelMap2D> {
    let first = labels
        .first()
        .ok_or_else(|| Error::InvalidData("nothing to fuse".into()))?;
    if labels.len() != weights.len() {
        return Err(Error::LengthMismatch(weights.len(), labels.len()));
    }
    for l in labels {
        ensure_same_dims(first.dims(), l.dims())?;
    }
    let (w, h) = first.dims();
    let data = (0..w * h)
        .map(|i| {
            let (mut acc, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
            for (l, wk) in labels.iter().zip(&weights.w) {
                let v = l.data()[i];
                acc += wk * v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            acc.clamp(lo, hi)
        })
        .collect();
    LabelMap2D::new(w, h, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Oasis,
    Fwal,
    Fwow,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Oasis, Strategy::Fwal, Strategy::Fwow];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Oasis => "oasis",
            Strategy::Fwal => "fwal",
            Strategy::Fwow => "fwow",
        }
    }

    pub fn needs_registration(self) -> bool {
        self != Strategy::Fwow
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oasis" => Ok(Strategy::Oasis),
            "fwal" => Ok(Strategy::Fwal),
            "fwow" => Ok(Strategy::Fwow),
            other => Err(Error::InvalidParams(format!(
                "unknown strategy {other:?} (oasis, fwal, fwow)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub strategy: Strategy,
    pub n_atlases: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Oasis,
            n_atlases: DEFAULT_ATLAS_COUNT,
        }
    }
}

/// Loss summary of one atlas-to-test registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub atlas: String,
    pub initial_total: f64,
    pub final_total: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// An atlas carried onto the test grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedAtlas {
    pub id: String,
    pub image: Image2D,
    pub label: LabelMap2D,
    /// Absent when the atlas was not registered.
    pub summary: Option<PairSummary>,
}

impl WarpedAtlas {
    /// The atlas as-is, for strategies that skip registration.
    pub fn unwarped(entry: &AtlasEntry) -> Self {
        Self {
            id: entry.id().to_string(),
            image: entry.image().clone(),
            label: entry.label().clone(),
            summary: None,
        }
    }

    /// Registers the atlas to the test image without labels.
    pub fn register(
        entry: &AtlasEntry,
        test_img: &Image2D,
        cfg: &RegistrationConfig,
    ) -> Result<Self> {
        let reg = register_to_test(entry.image(), test_img, cfg)?;
        let summary = PairSummary {
            atlas: entry.id().to_string(),
            initial_total: reg.initial.total,
            final_total: reg.final_loss.total,
            iterations: reg.levels.iter().map(|l| l.iterations).sum(),
            converged: reg.converged,
        };
        Ok(Self {
            id: entry.id().to_string(),
            image: warp_values(entry.image(), &reg.field)?,
            label: warp_values(entry.label(), &reg.field)?,
            summary: Some(summary),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    /// Binary result.
    pub label: LabelMap2D,
    /// Fused map before thresholding.
    pub soft: LabelMap2D,
    pub weights: FusionWeights,
    /// Selected atlas ids, nearest first.
    pub selected: Vec<String>,
    /// One entry per registered atlas.
    pub registrations: Vec<PairSummary>,
}

/// Weights and fuses already-warped atlases. For OASIS, `loa` must cover the
/// atlases' ids; the other strategies ignore it.
pub fn fuse_with_strategy(
    strategy: Strategy,
    test_img: &Image2D,
    atlases: &[WarpedAtlas],
    loa: Option<&LoaMatrix>,
) -> Result<Segmentation> {
    let ids: Vec<String> = atlases.iter().map(|a| a.id.clone()).collect();
    let labels: Vec<LabelMap2D> = atlases.iter().map(|a| a.label.clone()).collect();
    let weights = match strategy {
        Strategy::Fwow | Strategy::Fwal => {
            let images: Vec<Image2D> = atlases.iter().map(|a| a.image.clone()).collect();
            fwal_weights(&ids, &images, test_img)?
        }
        Strategy::Oasis => {
            let loa =
                loa.ok_or_else(|| Error::InvalidParams("OASIS fusion needs an LOA matrix".into()))?;
            let prior = atlas_weights_from_loa(&loa.restrict(&ids)?)?;
            test_time_weights(&labels, &prior)?
        }
    };
    let soft = fuse_labels(&labels, &weights)?;
    let label = threshold(&soft, FUSION_THRESHOLD)?;
    let registrations = atlases.iter().filter_map(|a| a.summary.clone()).collect();
    Ok(Segmentation {
        label,
        soft,
        weights,
        selected: ids,
        registrations,
    })
}

/// Segments one slice: select the `n` nearest atlases, carry them onto the
/// test grid (except FwoW), weight, fuse and threshold.
pub fn segment(
    test_img: &Image2D,
    set: &AtlasSet,
    cfg: &RegistrationConfig,
    strategy: Strategy,
    n: usize,
) -> Result<Segmentation> {
    if n < 2 || n > set.len() {
        return Err(Error::NOutOfRange {
            n,
            available: set.len(),
        });
    }
    if test_img.dims() != set.dims() {
        return Err(Error::DimensionMismatch {
            expected: set.dims(),
            actual: test_img.dims(),
        });
    }
    let test_img = normalize(test_img)?;
    let selected = select_atlases(&extract_features(&test_img)?, set, n)?;
    let entries = set.subset(&selected)?;
    let atlases = if strategy.needs_registration() {
        crate::parallel::map(&entries, |e| WarpedAtlas::register(e, &test_img, cfg))
            .into_iter()
            .collect::<Result<Vec<_>>>()?
    } else {
        entries.iter().map(|e| WarpedAtlas::unwarped(e)).collect()
    };
    let loa = match strategy {
        Strategy::Oasis => Some(compute_loa_matrix(&set.restricted(&selected)?, cfg)?),
        _ => None,
    };
    fuse_with_strategy(strategy, &test_img, &atlases, loa.as_ref())
}
