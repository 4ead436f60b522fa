//! Volume overlap, volume difference and boundary distance.
//!
//! Masks are label volumes binarized at 0.5. Boundary voxels are foreground
//! voxels with at least one 6-neighbor in the background; positions outside
//! the volume count as background, so the first and last slices of an organ
//! that touches them are boundary in full.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelMap2D, Raster, Spacing, Volume};

pub type LabelVolume = Volume<LabelMap2D>;

fn check_shapes(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            expected: gt.dims(),
            actual: pred.dims(),
        });
    }
    if pred.depth() != gt.depth() {
        return Err(Error::SliceCountMismatch {
            expected: gt.depth(),
            actual: pred.depth(),
        });
    }
    Ok(())
}

fn foreground_count(v: &LabelVolume) -> usize {
    v.slices().iter().map(LabelMap2D::foreground_count).sum()
}

/// Dice overlap in percent. Two empty masks score 100.
pub fn dsc3d(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut inter = 0usize;
    for (p, g) in pred.slices().iter().zip(gt.slices()) {
        inter += p
            .data()
            .iter()
            .zip(g.data())
            .filter(|(a, b)| **a >= 0.5 && **b >= 0.5)
            .count();
    }
    let total = foreground_count(pred) + foreground_count(gt);
    if total == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / total as f64)
}

/// Absolute relative volume difference in percent.
pub fn arvd(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64> {
    check_shapes(pred, gt)?;
    let voxel = gt.spacing().voxel_volume();
    let vg = foreground_count(gt) as f64 * voxel;
    if vg == 0.0 {
        return Err(Error::EmptyReference);
    }
    let vp = foreground_count(pred) as f64 * voxel;
    Ok(100.0 * (vp - vg).abs() / vg)
}

/// Boundary voxels as `(x, y, z)` indices, in z-y-x order.
pub fn boundary_voxels(v: &LabelVolume) -> Vec<[usize; 3]> {
    let (w, h) = v.dims();
    let d = v.depth();
    let fg = |x: isize, y: isize, z: isize| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < w
            && (y as usize) < h
            && (z as usize) < d
            && v.slice(z as usize).is_foreground(x as usize, y as usize)
    };
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (xi, yi, zi) = (x as isize, y as isize, z as isize);
                if !fg(xi, yi, zi) {
                    continue;
                }
                let edge = [
                    (-1, 0, 0),
                    (1, 0, 0),
                    (0, -1, 0),
                    (0, 1, 0),
                    (0, 0, -1),
                    (0, 0, 1),
                ]
                .iter()
                .any(|(dx, dy, dz)| !fg(xi + dx, yi + dy, zi + dz));
                if edge {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn physical(points: &[[usize; 3]], s: Spacing) -> Vec<[f64; 3]> {
    points
        .iter()
        .map(|p| [p[0] as f64 * s.x, p[1] as f64 * s.y, p[2] as f64 * s.z])
        .collect()
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Largest distance from a point of `from` to its nearest point of `to`.
fn directed(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut worst = 0.0_f64;
    for a in from {
        let mut nearest = f64::INFINITY;
        for b in to {
            let d = sq_dist(a, b);
            if d < nearest {
                nearest = d;
                // This point can no longer raise the maximum.
                if nearest <= worst {
                    break;
                }
            }
        }
        worst = worst.max(nearest);
    }
    worst.sqrt()
}

/// Symmetric Hausdorff distance between boundary voxel sets, in mm.
pub fn hausdorff(pred: &LabelVolume, gt: &LabelVolume, spacing: Spacing) -> Result<f64> {
    check_shapes(pred, gt)?;
    let a = boundary_voxels(pred);
    let b = boundary_voxels(gt);
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (a, b) = (physical(&a, spacing), physical(&b, spacing));
    Ok(directed(&a, &b).max(directed(&b, &a)))
}

/// Slice ranges of apex, mid and base for `slices` slices:
/// `[0, ceil(S/3))`, `[ceil(S/3), S - floor(S/3))`, `[S - floor(S/3), S)`.
pub fn region_ranges(slices: usize) -> Result<[std::ops::Range<usize>; 3]> {
    if slices < 3 {
        return Err(Error::TooFewSlices(slices));
    }
    let apex_end = slices.div_ceil(3);
    let base_start = slices - slices / 3;
    Ok([0..apex_end, apex_end..base_start, base_start..slices])
}

pub fn partition_regions<T: Raster + Clone>(
    vol: &Volume<T>,
) -> Result<(Volume<T>, Volume<T>, Volume<T>)> {
    let [apex, mid, base] = region_ranges(vol.depth())?;
    let part = |r: std::ops::Range<usize>| vol.sub_volume(r.start, r.end).expect("non-empty range");
    Ok((part(apex), part(mid), part(base)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Apex,
    Base,
    Whole,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Apex, Region::Base, Region::Whole];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::Apex => "apex",
            Region::Base => "base",
            Region::Whole => "whole",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "apex" => Ok(Region::Apex),
            "base" => Ok(Region::Base),
            "whole" => Ok(Region::Whole),
            other => Err(Error::InvalidData(format!("unknown region {other:?}"))),
        }
    }
}

/// One row of the evaluation table. `arvd_percent` is absent when the
/// reference region is empty, `hd_mm` when either mask is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub region: Region,
    pub dsc_percent: f64,
    pub arvd_percent: Option<f64>,
    pub hd_mm: Option<f64>,
}

fn record(
    region: Region,
    pred: &LabelVolume,
    gt: &LabelVolume,
    spacing: Spacing,
) -> Result<MetricRecord> {
    let arvd_percent = match arvd(pred, gt) {
        Ok(v) => Some(v),
        Err(Error::EmptyReference) => None,
        Err(e) => return Err(e),
    };
    let hd_mm = match hausdorff(pred, gt, spacing) {
        Ok(v) => Some(v),
        Err(Error::EmptyMask) if region != Region::Whole => None,
        Err(e) => return Err(e),
    };
    Ok(MetricRecord {
        region,
        dsc_percent: dsc3d(pred, gt)?,
        arvd_percent,
        hd_mm,
    })
}

/// Apex, base and whole records. An empty mask in apex or base leaves that
/// row's missing values blank; an empty whole-volume mask is an error.
pub fn evaluate_case(
    pred: &LabelVolume,
    gt: &LabelVolume,
    spacing: Spacing,
) -> Result<[MetricRecord; 3]> {
    check_shapes(pred, gt)?;
    let (p_apex, _, p_base) = partition_regions(pred)?;
    let (g_apex, _, g_base) = partition_regions(gt)?;
    Ok([
        record(Region::Apex, &p_apex, &g_apex, spacing)?,
        record(Region::Base, &p_base, &g_base, spacing)?,
        record(Region::Whole, pred, gt, spacing)?,
    ])
}

pub const METRICS_CSV_HEADER: [&str; 5] =
    ["case_id", "region", "dsc_percent", "arvd_percent", "hd_mm"];

fn fmt_value(v: f64) -> String {
    format!("{v:.6}")
}

/// CSV with one row per `(case, region)` in the order given.
pub fn metrics_csv<'a>(
    rows: impl IntoIterator<Item = (&'a str, &'a MetricRecord)>,
) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::InvalidData(format!("csv: {e}"));
    w.write_record(METRICS_CSV_HEADER).map_err(err)?;
    for (case, r) in rows {
        w.write_record([
            case.to_string(),
            r.region.to_string(),
            fmt_value(r.dsc_percent),
            r.arvd_percent.map(fmt_value).unwrap_or_default(),
            r.hd_mm.map(fmt_value).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidData(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(
        w: usize,
        h: usize,
        d: usize,
        f: impl Fn(usize, usize, usize) -> bool,
    ) -> LabelVolume {
        let slices = (0..d)
            .map(|z| LabelMap2D::from_mask(w, h, |x, y| f(x, y, z)).unwrap())
            .collect();
        Volume::new(slices, Spacing::default()).unwrap()
    }

    fn cube(n: usize, lo: [usize; 3], side: usize) -> LabelVolume {
        let inside = move |v: usize, l: usize| v >= l && v < l + side;
        volume(n, n, n, move |x, y, z| {
            inside(x, lo[0]) && inside(y, lo[1]) && inside(z, lo[2])
        })
    }

    #[test]
    fn dsc_examples() {
        let a = cube(10, [1, 1, 1], 8);
        assert_eq!(dsc3d(&a, &a).unwrap(), 100.0);
        assert_eq!(
            dsc3d(&cube(10, [0, 0, 0], 3), &cube(10, [5, 5, 5], 3)).unwrap(),
            0.0
        );
        let inner = cube(10, [3, 3, 3], 4);
        assert!((dsc3d(&inner, &a).unwrap() - 100.0 * 128.0 / 576.0).abs() < 1e-12);
        let empty = volume(4, 4, 3, |_, _, _| false);
        assert_eq!(dsc3d(&empty, &empty).unwrap(), 100.0);
        assert!(
            matches!(dsc3d(&volume(4, 4, 4, |_, _, _| false), &cube(4, [0, 0, 0], 2)), Ok(v) if v == 0.0)
        );
        assert!(matches!(
            dsc3d(&cube(4, [0, 0, 0], 2), &cube(5, [0, 0, 0], 2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn arvd_examples() {
        let a = cube(10, [1, 1, 1], 5);
        assert_eq!(arvd(&a, &a).unwrap(), 0.0);
        // 110 versus 100 voxels.
        let gt = volume(20, 10, 1, |x, y, _| y * 20 + x < 100);
        let pred = volume(20, 10, 1, |x, y, _| y * 20 + x < 110);
        assert!((arvd(&pred, &gt).unwrap() - 10.0).abs() < 1e-12);
        let empty = volume(20, 10, 1, |_, _, _| false);
        assert!(matches!(arvd(&pred, &empty), Err(Error::EmptyReference)));
    }

    #[test]
    fn hausdorff_examples() {
        let a = cube(8, [2, 2, 2], 3);
        assert_eq!(hausdorff(&a, &a, Spacing::default()).unwrap(), 0.0);
        let p = volume(8, 3, 3, |x, y, z| (x, y, z) == (1, 1, 1));
        let q = volume(8, 3, 3, |x, y, z| (x, y, z) == (4, 1, 1));
        assert_eq!(hausdorff(&p, &q, Spacing::default()).unwrap(), 3.0);
        let empty = volume(8, 3, 3, |_, _, _| false);
        assert!(matches!(
            hausdorff(&p, &empty, Spacing::default()),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn hausdorff_matches_exhaustive_pairs_for_offset_cubes() {
        let a = cube(12, [2, 2, 2], 5);
        let b = cube(12, [4, 3, 2], 5);
        let s = Spacing::new(0.5, 0.5, 3.0).unwrap();
        let (ba, bb) = (
            physical(&boundary_voxels(&a), s),
            physical(&boundary_voxels(&b), s),
        );
        let directed = |x: &[[f64; 3]], y: &[[f64; 3]]| {
            x.iter()
                .map(|p| {
                    y.iter()
                        .map(|q| sq_dist(p, q).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        assert_eq!(
            hausdorff(&a, &b, s).unwrap(),
            directed(&ba, &bb).max(directed(&bb, &ba))
        );
    }

    #[test]
    fn boundary_of_a_cube_is_its_surface() {
        let c = cube(7, [1, 1, 1], 5);
        // 5^3 - 3^3 surface voxels.
        assert_eq!(boundary_voxels(&c).len(), 125 - 27);
    }

    #[test]
    fn region_partition_rounding() {
        let lens = |s: usize| region_ranges(s).unwrap().map(|r| r.len());
        assert_eq!(lens(9), [3, 3, 3]);
        assert_eq!(lens(10), [4, 3, 3]);
        assert_eq!(lens(100), [34, 33, 33]);
        assert!(matches!(region_ranges(2), Err(Error::TooFewSlices(2))));

        let vol = volume(3, 3, 100, |x, _, z| x == z % 3);
        let (a, m, b) = partition_regions(&vol).unwrap();
        let joined: Vec<LabelMap2D> = a
            .slices()
            .iter()
            .chain(m.slices())
            .chain(b.slices())
            .cloned()
            .collect();
        assert_eq!(joined, vol.slices());
    }

    #[test]
    fn evaluate_perfect_and_empty_apex() {
        let gt = volume(8, 8, 9, |x, y, z| {
            z >= 3 && (2..6).contains(&x) && (2..6).contains(&y)
        });
        let rows = evaluate_case(&gt, &gt, Spacing::default()).unwrap();
        assert_eq!(rows.map(|r| r.region), Region::ALL);
        assert_eq!(rows[0].dsc_percent, 100.0);
        assert_eq!(rows[0].arvd_percent, None);
        assert_eq!(rows[0].hd_mm, None);
        for r in &rows[1..] {
            assert_eq!(
                (r.dsc_percent, r.arvd_percent, r.hd_mm),
                (100.0, Some(0.0), Some(0.0))
            );
        }
        let empty = volume(8, 8, 9, |_, _, _| false);
        assert!(matches!(
            evaluate_case(&empty, &gt, Spacing::default()),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn csv_schema() {
        let r = MetricRecord {
            region: Region::Whole,
            dsc_percent: 91.5,
            arvd_percent: None,
            hd_mm: Some(2.0),
        };
        let text = String::from_utf8(metrics_csv([("case_a", &r)]).unwrap()).unwrap();
        assert_eq!(
            text,
            "case_id,region,dsc_percent,arvd_percent,hd_mm\ncase_a,whole,91.500000,,2.000000\n"
        );
    }
}
