//! OASG binary grid files.
//!
//! ```text
//! "OASG"        4 bytes ASCII magic
//! version       u32 LE, always 1
//! kind          u8 (0 = image, 1 = label, 2 = field)
//! width         u32 LE
//! height        u32 LE
//! channels      u32 LE (1 for image/label, 2 for field)
//! samples       width*height*channels f32 LE, row-major, channel-interleaved
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{DisplacementField, Image2D, LabelMap2D, Raster};
use crate::error::{Error, Result};
use crate::io::write_atomic;

const MAGIC: &[u8; 4] = b"OASG";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Image = 0,
    Label = 1,
    Field = 2,
}

impl GridKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(GridKind::Image),
            1 => Some(GridKind::Label),
            2 => Some(GridKind::Field),
            _ => None,
        }
    }

    fn channels(self) -> u32 {
        match self {
            GridKind::Field => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OasgGrid {
    Image(Image2D),
    Label(LabelMap2D),
    Field(DisplacementField),
}

impl OasgGrid {
    pub fn kind(&self) -> GridKind {
        match self {
            OasgGrid::Image(_) => GridKind::Image,
            OasgGrid::Label(_) => GridKind::Label,
            OasgGrid::Field(_) => GridKind::Field,
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            OasgGrid::Image(i) => i.dims(),
            OasgGrid::Label(l) => l.dims(),
            OasgGrid::Field(f) => f.dims(),
        }
    }

    pub fn into_image(self) -> Result<Image2D> {
        match self {
            OasgGrid::Image(i) => Ok(i),
            other => Err(Error::InvalidData(format!(
                "expected an image grid, found {:?}",
                other.kind()
            ))),
        }
    }

    pub fn into_label(self) -> Result<LabelMap2D> {
        match self {
            OasgGrid::Label(l) => Ok(l),
            other => Err(Error::InvalidData(format!(
                "expected a label grid, found {:?}",
                other.kind()
            ))),
        }
    }

    pub fn into_field(self) -> Result<DisplacementField> {
        match self {
            OasgGrid::Field(f) => Ok(f),
            other => Err(Error::InvalidData(format!(
                "expected a field grid, found {:?}",
                other.kind()
            ))),
        }
    }
}

impl From<Image2D> for OasgGrid {
    fn from(v: Image2D) -> Self {
        OasgGrid::Image(v)
    }
}

impl From<LabelMap2D> for OasgGrid {
    fn from(v: LabelMap2D) -> Self {
        OasgGrid::Label(v)
    }
}

impl From<DisplacementField> for OasgGrid {
    fn from(v: DisplacementField) -> Self {
        OasgGrid::Field(v)
    }
}

pub fn write_oasg_to<W: Write>(mut out: W, grid: &OasgGrid) -> Result<()> {
    let kind = grid.kind();
    let (w, h) = grid.dims();
    let mut buf = Vec::with_capacity(HEADER_LEN + w * h * kind.channels() as usize * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(kind as u8);
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&kind.channels().to_le_bytes());
    match grid {
        OasgGrid::Image(i) => i
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        OasgGrid::Label(l) => l
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        OasgGrid::Field(f) => {
            for (&u, &v) in f.dx().iter().zip(f.dy()) {
                buf.extend_from_slice(&(u as f32).to_le_bytes());
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn write_oasg(path: impl AsRef<Path>, grid: &OasgGrid) -> Result<()> {
    let mut buf = Vec::new();
    write_oasg_to(&mut buf, grid)?;
    write_atomic(path.as_ref(), &buf)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses an OASG stream. `origin` only labels error messages.
pub fn read_oasg_from<R: Read>(mut input: R, origin: &Path) -> Result<OasgGrid> {
    let bad = |reason: String| Error::Format {
        path: origin.to_path_buf(),
        reason,
    };
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32_at(&bytes, 4);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let kind =
        GridKind::from_byte(bytes[8]).ok_or_else(|| bad(format!("unknown kind {}", bytes[8])))?;
    let width = u32_at(&bytes, 9) as usize;
    let height = u32_at(&bytes, 13) as usize;
    let channels = u32_at(&bytes, 17);
    if channels != kind.channels() {
        return Err(bad(format!("{kind:?} grid with {channels} channels")));
    }
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels as usize))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(bad(format!(
            "expected {} payload bytes, found {}",
            count * 4,
            payload.len()
        )));
    }
    let samples: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let grid = match kind {
        GridKind::Image => OasgGrid::Image(Image2D::new(width, height, samples)?),
        GridKind::Label => OasgGrid::Label(LabelMap2D::new(width, height, samples)?),
        GridKind::Field => {
            let (dx, dy) = samples.chunks_exact(2).map(|p| (p[0], p[1])).unzip();
            OasgGrid::Field(DisplacementField::new(width, height, dx, dy)?)
        }
    };
    Ok(grid)
}

pub fn read_oasg(path: impl AsRef<Path>) -> Result<OasgGrid> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_oasg_from(std::io::BufReader::new(file), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let img = Image2D::new(2, 1, vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_oasg_to(&mut buf, &img.into()).unwrap();
        let mut expected = b"OASG".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(0);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn field_is_channel_interleaved() {
        let f = DisplacementField::new(2, 1, vec![1.0, 2.0], vec![3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_oasg_to(&mut buf, &f.into()).unwrap();
        assert_eq!(buf[8], 2);
        assert_eq!(u32_at(&buf, 17), 2);
        let vals: Vec<f32> = buf[HEADER_LEN..]
            .chunks(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(vals, vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn rejects_corrupt_input() {
        let p = Path::new("mem");
        assert!(read_oasg_from(&b"OASX"[..], p).is_err());
        let img = Image2D::new(2, 2, vec![0.0; 4]).unwrap();
        let mut buf = Vec::new();
        write_oasg_to(&mut buf, &img.into()).unwrap();
        assert!(read_oasg_from(&buf[..buf.len() - 1], p).is_err());
        let mut wrong_version = buf.clone();
        wrong_version[4] = 2;
        assert!(read_oasg_from(&wrong_version[..], p).is_err());
        let mut wrong_channels = buf.clone();
        wrong_channels[17] = 2;
        assert!(read_oasg_from(&wrong_channels[..], p).is_err());
        let mut label_out_of_range = buf;
        label_out_of_range[8] = 1;
        label_out_of_range[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&2.0f32.to_le_bytes());
        assert!(read_oasg_from(&label_out_of_range[..], p).is_err());
    }

    proptest! {
        #[test]
        fn f32_representable_grids_roundtrip(w in 1usize..6, h in 1usize..6, seed in prop::collection::vec(-1000i32..1000, 72)) {
            let vals: Vec<f64> = seed.iter().take(w * h).map(|&v| v as f64 / 8.0).collect();
            let other: Vec<f64> = seed.iter().rev().take(w * h).map(|&v| v as f64 / 16.0).collect();
            let grids = [
                OasgGrid::Image(Image2D::new(w, h, vals.clone()).unwrap()),
                OasgGrid::Label(LabelMap2D::new(w, h, seed.iter().take(w * h).map(|&v| v.rem_euclid(9) as f64 / 8.0).collect()).unwrap()),
                OasgGrid::Field(DisplacementField::new(w, h, vals, other).unwrap()),
            ];
            for g in grids {
                let mut buf = Vec::new();
                write_oasg_to(&mut buf, &g).unwrap();
                let back = read_oasg_from(&buf[..], Path::new("mem")).unwrap();
                prop_assert_eq!(back, g);
            }
        }
    }
}
