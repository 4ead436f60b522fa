//! Strategy-by-atlas-count ablation over a cohort.
//!
//! Slices are processed independently. For each slice the LOA matrix of the
//! whole atlas set is computed once; any selected subset reads its
//! sub-matrix, which equals recomputing it because every entry is a single
//! pairwise registration. Each test slice is registered once to each of its
//! `max(ns)` nearest atlases and the warped atlases are shared by every
//! strategy and count.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atlas::{extract_features, read_manifest, AtlasEntry, AtlasSet};
use crate::error::{Error, Result};
use crate::fusion::{
    compute_loa_matrix, fuse_with_strategy, LoaMatrix, PairSummary, Strategy, WarpedAtlas,
};
use crate::grid::{normalize, read_volume_or_slice, Image2D, LabelMap2D, OasgGrid, Volume};
use crate::metrics::dsc3d;
use crate::registration::RegistrationConfig;

/// An image volume with its label volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub image: Volume<Image2D>,
    pub label: Volume<LabelMap2D>,
}

impl Subject {
    pub fn new(
        id: impl Into<String>,
        image: Volume<Image2D>,
        label: Volume<LabelMap2D>,
    ) -> Result<Self> {
        if image.dims() != label.dims() {
            return Err(Error::DimensionMismatch {
                expected: image.dims(),
                actual: label.dims(),
            });
        }
        if image.depth() != label.depth() {
            return Err(Error::SliceCountMismatch {
                expected: image.depth(),
                actual: label.depth(),
            });
        }
        Ok(Self {
            id: id.into(),
            image,
            label,
        })
    }
}

/// Loads every subject listed in a manifest. Paths may be volume
/// directories or single slices.
pub fn load_subjects(manifest: &Path) -> Result<Vec<Subject>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let image = read_volume_or_slice(&e.image, OasgGrid::into_image)?;
            let label = read_volume_or_slice(&e.label, OasgGrid::into_label)?;
            Subject::new(e.id, image, label)
        })
        .collect()
}

/// One registration inside a batch run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub target: String,
    pub slice: usize,
    #[serde(flatten)]
    pub summary: PairSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub n: usize,
    pub cases: usize,
    pub mean_dsc_percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    /// Ordered by strategy, then `n`.
    pub rows: Vec<AblationRow>,
    /// Whole-volume DSC per test case, aligned with `rows`.
    pub per_case: Vec<Vec<f64>>,
    /// LOA matrices per slice.
    pub loa: Vec<LoaMatrix>,
    /// Test-time registrations, by slice then test.
    pub pairs: Vec<PairRecord>,
}

impl AblationReport {
    pub fn mean(&self, strategy: Strategy, n: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.n == n)
            .map(|r| r.mean_dsc_percent)
    }

    /// Drop from the strategy's best mean to its mean at `n`.
    pub fn decline_to(&self, strategy: Strategy, n: usize) -> Option<f64> {
        let best = self
            .rows
            .iter()
            .filter(|r| r.strategy == strategy)
            .map(|r| r.mean_dsc_percent)
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))?;
        Some(best - self.mean(strategy, n)?)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::InvalidData(format!("csv: {e}"));
        w.write_record(["strategy", "n_atlases", "cases", "mean_dsc_percent"])
            .map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.strategy.to_string(),
                r.n.to_string(),
                r.cases.to_string(),
                format!("{:.6}", r.mean_dsc_percent),
            ])
            .map_err(err)?;
        }
        w.into_inner()
            .map_err(|e| Error::InvalidData(e.to_string()))
    }
}

fn slice_set(atlases: &[Subject], s: usize) -> Result<AtlasSet> {
    AtlasSet::new(
        atlases
            .iter()
            .map(|a| {
                AtlasEntry::new(
                    a.id.clone(),
                    a.image.slice(s).clone(),
                    a.label.slice(s).clone(),
                )
            })
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Runs every strategy at every count in `ns` on every test subject and
/// reports the mean whole-volume DSC.
pub fn run_ablation(
    atlases: &[Subject],
    tests: &[Subject],
    cfg: &RegistrationConfig,
    strategies: &[Strategy],
    ns: &[usize],
) -> Result<AblationReport> {
    cfg.validate()?;
    let first = atlases
        .first()
        .ok_or_else(|| Error::InvalidParams("no atlases".into()))?;
    if tests.is_empty() {
        return Err(Error::InvalidParams("no test subjects".into()));
    }
    let (dims, depth) = (first.image.dims(), first.image.depth());
    for s in atlases.iter().chain(tests) {
        if s.image.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                actual: s.image.dims(),
            });
        }
        if s.image.depth() != depth {
            return Err(Error::SliceCountMismatch {
                expected: depth,
                actual: s.image.depth(),
            });
        }
    }
    let mut ns = ns.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let mut strategies = strategies.to_vec();
    strategies.sort_unstable();
    strategies.dedup();
    if let Some(&n) = ns.iter().find(|&&n| n < 2 || n > atlases.len()) {
        return Err(Error::NOutOfRange {
            n,
            available: atlases.len(),
        });
    }
    let max_n = *ns
        .last()
        .ok_or_else(|| Error::InvalidParams("no atlas counts".into()))?;
    let registered = strategies.iter().any(|s| s.needs_registration());

    let combos: Vec<(Strategy, usize)> = strategies
        .iter()
        .flat_map(|&s| ns.iter().map(move |&n| (s, n)))
        .collect();
    // slices_out[t][combo] collects one label per slice.
    let mut slices_out: Vec<Vec<Vec<LabelMap2D>>> =
        vec![vec![Vec::with_capacity(depth); combos.len()]; tests.len()];
    let mut loas = Vec::with_capacity(depth);
    let mut pairs = Vec::new();

    for s in 0..depth {
        let set = slice_set(atlases, s)?;
        let loa = if strategies.contains(&Strategy::Oasis) {
            Some(compute_loa_matrix(&set, cfg)?)
        } else {
            None
        };
        let per_test =
            crate::parallel::map(tests, |t| -> Result<(Vec<LabelMap2D>, Vec<PairSummary>)> {
                let test_img = normalize(t.image.slice(s))?;
                let ranked = set.ranked(&extract_features(&test_img)?)?;
                let nearest: Vec<&AtlasEntry> = ranked
                    .iter()
                    .take(max_n)
                    .map(|(id, _)| set.get(id).expect("ranked ids come from the set"))
                    .collect();
                let warped = if registered {
                    nearest
                        .iter()
                        .map(|e| WarpedAtlas::register(e, &test_img, cfg))
                        .collect::<Result<Vec<_>>>()?
                } else {
                    Vec::new()
                };
                let unwarped: Vec<WarpedAtlas> =
                    nearest.iter().map(|e| WarpedAtlas::unwarped(e)).collect();
                let labels = combos
                    .iter()
                    .map(|&(strategy, n)| {
                        let pool = if strategy.needs_registration() {
                            &warped[..n]
                        } else {
                            &unwarped[..n]
                        };
                        Ok(fuse_with_strategy(strategy, &test_img, pool, loa.as_ref())?.label)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((
                    labels,
                    warped.into_iter().filter_map(|w| w.summary).collect(),
                ))
            });
        for (t, result) in per_test.into_iter().enumerate() {
            let (labels, summaries) = result?;
            pairs.extend(summaries.into_iter().map(|summary| PairRecord {
                target: tests[t].id.clone(),
                slice: s,
                summary,
            }));
            for (c, label) in labels.into_iter().enumerate() {
                slices_out[t][c].push(label);
            }
        }
        if let Some(loa) = loa {
            loas.push(loa);
        }
    }

    let mut per_case = vec![Vec::with_capacity(tests.len()); combos.len()];
    for (t, subject) in tests.iter().enumerate() {
        for (c, labels) in std::mem::take(&mut slices_out[t]).into_iter().enumerate() {
            let pred = Volume::new(labels, subject.label.spacing())?;
            per_case[c].push(dsc3d(&pred, &subject.label)?);
        }
    }
    let rows = combos
        .iter()
        .zip(&per_case)
        .map(|(&(strategy, n), dscs)| AblationRow {
            strategy,
            n,
            cases: dscs.len(),
            mean_dsc_percent: dscs.iter().sum::<f64>() / dscs.len() as f64,
        })
        .collect();
    Ok(AblationReport {
        rows,
        per_case,
        loa: loas,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_cohort, PhantomParams};

    fn subjects(cases: &[(String, crate::phantom::PhantomCase)]) -> Vec<Subject> {
        cases
            .iter()
            .map(|(id, c)| Subject::new(id.clone(), c.image.clone(), c.label.clone()).unwrap())
            .collect()
    }

    #[test]
    fn rows_are_ordered_and_deterministic() {
        let p = PhantomParams {
            width: 48,
            height: 48,
            slices: 2,
            organ_semi_axis_x: [6.0, 8.0],
            organ_semi_axis_y: [5.0, 7.0],
            deform_max: 2.0,
            smoothing_radius: 8.0,
            seed: 3,
            ..Default::default()
        };
        let cohort = generate_cohort(&p, 3, 2).unwrap();
        let (atlases, tests) = (subjects(&cohort.atlases), subjects(&cohort.tests));
        let cfg = RegistrationConfig {
            max_iters: 60,
            ..Default::default()
        };
        let report = run_ablation(
            &atlases,
            &tests,
            &cfg,
            &[Strategy::Fwow, Strategy::Oasis, Strategy::Fwal],
            &[3, 2],
        )
        .unwrap();
        let keys: Vec<(Strategy, usize)> = report.rows.iter().map(|r| (r.strategy, r.n)).collect();
        assert_eq!(
            keys,
            vec![
                (Strategy::Oasis, 2),
                (Strategy::Oasis, 3),
                (Strategy::Fwal, 2),
                (Strategy::Fwal, 3),
                (Strategy::Fwow, 2),
                (Strategy::Fwow, 3)
            ]
        );
        assert!(report
            .rows
            .iter()
            .all(|r| r.cases == 2 && (0.0..=100.0).contains(&r.mean_dsc_percent)));
        assert_eq!(report.loa.len(), 2);
        // Two slices, two tests, three nearest atlases each.
        assert_eq!(report.pairs.len(), 12);
        let again = run_ablation(&atlases, &tests, &cfg, &Strategy::ALL, &[2, 3]).unwrap();
        assert_eq!(report.to_csv().unwrap(), again.to_csv().unwrap());
        assert!(matches!(
            run_ablation(&atlases, &tests, &cfg, &Strategy::ALL, &[4]),
            Err(Error::NOutOfRange { .. })
        ));
    }
}
