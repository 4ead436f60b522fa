use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_oasg, write_oasg, OasgGrid, Raster};
use crate::error::{Error, Result};
use crate::io::write_json_atomic;

/// Physical voxel size in millimetres: in-plane `x`, `y` and slice thickness `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Spacing {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let s = Self { x, y, z };
        s.validate()?;
        Ok(s)
    }

    pub fn isotropic(mm: f64) -> Result<Self> {
        Self::new(mm, mm, mm)
    }

    fn validate(&self) -> Result<()> {
        if [self.x, self.y, self.z]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!(
                "spacing must be positive, got {self:?}"
            )))
        }
    }

    pub fn voxel_volume(&self) -> f64 {
        self.x * self.y * self.z
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self {
            x: 1.0,
            y: 1.0,
            z: 1.0,
        }
    }
}

/// Ordered stack of equally sized slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    slices: Vec<T>,
    spacing: Spacing,
}

impl<T: Raster> Volume<T> {
    pub fn new(slices: Vec<T>, spacing: Spacing) -> Result<Self> {
        spacing.validate()?;
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidData("volume needs at least one slice".into()))?;
        let dims = first.dims();
        for s in &slices[1..] {
            super::ensure_same_dims(dims, s.dims())?;
        }
        Ok(Self { slices, spacing })
    }

    pub fn slices(&self) -> &[T] {
        &self.slices
    }

    pub fn into_slices(self) -> Vec<T> {
        self.slices
    }

    pub fn slice(&self, i: usize) -> &T {
        &self.slices[i]
    }

    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.slices[0].dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    /// Slice range `[start, end)` as a new volume. Returns `None` when empty.
    pub fn sub_volume(&self, start: usize, end: usize) -> Option<Self>
    where
        T: Clone,
    {
        if start >= end || end > self.slices.len() {
            return None;
        }
        Some(Self {
            slices: self.slices[start..end].to_vec(),
            spacing: self.spacing,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SpacingSidecar {
    spacing_mm: [f64; 3],
}

const SIDECAR: &str = "spacing.json";

pub fn slice_file_name(index: usize) -> String {
    format!("slice_{index:04}.oasg")
}

/// Writes `slice_0000.oasg, slice_0001.oasg, ...` plus the spacing sidecar.
pub fn write_volume<T>(dir: impl AsRef<Path>, volume: &Volume<T>) -> Result<()>
where
    T: Raster + Clone + Into<OasgGrid>,
{
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, s) in volume.slices.iter().enumerate() {
        write_oasg(dir.join(slice_file_name(i)), &s.clone().into())?;
    }
    let sp = volume.spacing;
    write_json_atomic(
        &dir.join(SIDECAR),
        &SpacingSidecar {
            spacing_mm: [sp.x, sp.y, sp.z],
        },
    )
}

/// Reads a volume directory; slices are taken in file-name order starting at
/// `slice_0000.oasg` until the first missing index.
pub fn read_volume<T>(
    dir: impl AsRef<Path>,
    convert: impl Fn(OasgGrid) -> Result<T>,
) -> Result<Volume<T>>
where
    T: Raster,
{
    let dir = dir.as_ref();
    let sidecar: SpacingSidecar = serde_json::from_slice(&fs::read(dir.join(SIDECAR))?)?;
    let [x, y, z] = sidecar.spacing_mm;
    let spacing = Spacing::new(x, y, z)?;
    let mut slices = Vec::new();
    loop {
        let path = dir.join(slice_file_name(slices.len()));
        if !path.exists() {
            break;
        }
        slices.push(convert(read_oasg(&path)?)?);
    }
    if slices.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            reason: "no slice_0000.oasg".into(),
        });
    }
    Volume::new(slices, spacing)
}

/// Reads a volume directory, or a single OASG file as a one-slice volume
/// with unit spacing.
pub fn read_volume_or_slice<T>(
    path: impl AsRef<Path>,
    convert: impl Fn(OasgGrid) -> Result<T>,
) -> Result<Volume<T>>
where
    T: Raster,
{
    let path = path.as_ref();
    if path.is_dir() {
        read_volume(path, convert)
    } else {
        Volume::new(vec![convert(read_oasg(path)?)?], Spacing::default())
    }
}

/// True when `dir` looks like a volume directory.
pub fn is_volume_dir(dir: &Path) -> bool {
    dir.join(slice_file_name(0)).is_file()
}
