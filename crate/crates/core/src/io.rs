//! File formats: the MFI1 multi-channel container, PGM previews and
//! binary sampling masks.
//!
//! MFI1 layout (little endian): magic `b"MFI1"`, `u32 d`, `u32 dims[d]`,
//! `u32 N`, then `f64` values site-major, channel-minor.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, MultiImage};

pub const MFI_MAGIC: &[u8; 4] = b"MFI1";

/// Raw contents of an MFI1 file. Used directly for data that does not live on
/// an image grid of dimension ≤ 3 semantics (sinograms, flattened fields).
#[derive(Clone, Debug, PartialEq)]
pub struct MfiRecord {
    pub dims: Vec<usize>,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl MfiRecord {
    pub fn from_image(u: &MultiImage) -> Self {
        Self {
            dims: u.grid().dims().to_vec(),
            channels: u.channels(),
            values: u.values().to_vec(),
        }
    }

    pub fn into_image(self) -> Result<MultiImage> {
        let grid = Grid::new(&self.dims)?;
        MultiImage::from_values(&grid, self.channels, self.values)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 8 * self.values.len());
        out.extend_from_slice(MFI_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &n in &self.dims {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::Format("truncated MFI1 file".into()))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MFI_MAGIC {
            return Err(Error::Format("bad MFI1 magic".into()));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize;
        let d = u32_at(take(4)?);
        if d == 0 || d > 8 {
            return Err(Error::Format(format!("implausible MFI1 dimension {d}")));
        }
        let mut dims = Vec::with_capacity(d);
        for _ in 0..d {
            dims.push(u32_at(take(4)?));
        }
        let channels = u32_at(take(4)?);
        let count = dims
            .iter()
            .try_fold(channels, |acc, &n| acc.checked_mul(n))
            .ok_or_else(|| Error::Format("MFI1 size overflow".into()))?;
        let body = take(count.checked_mul(8).ok_or_else(|| Error::Format("MFI1 size overflow".into()))?)?;
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        if pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes in MFI1 file", bytes.len() - pos)));
        }
        Ok(Self { dims, channels, values })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

pub fn write_mfi(path: impl AsRef<Path>, u: &MultiImage) -> Result<()> {
    MfiRecord::from_image(u).write(path)
}

pub fn read_mfi(path: impl AsRef<Path>) -> Result<MultiImage> {
    MfiRecord::read(path)?.into_image()
}

/// Binary 8-bit PGM (P5), min-max scaled to 0..=255.
pub fn encode_pgm(values: &[f64], rows: usize, cols: usize) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for &v in values {
        let g = if range > 0.0 { ((v - lo) / range * 255.0).round() } else { 0.0 };
        out.push(g.clamp(0.0, 255.0) as u8);
    }
    out
}

/// One PGM per channel. 1D images become a single row; 3D images export the
/// central slice along the first axis.
pub fn write_pgm_channels(dir: impl AsRef<Path>, stem: &str, u: &MultiImage) -> Result<Vec<std::path::PathBuf>> {
    let dims = u.grid().dims();
    let (rows, cols, offset) = match dims.len() {
        1 => (1, dims[0], 0),
        2 => (dims[0], dims[1], 0),
        _ => (dims[1], dims[2], (dims[0] / 2) * dims[1] * dims[2]),
    };
    let mut paths = Vec::new();
    for c in 0..u.channels() {
        let ch = u.channel(c);
        let slice = &ch[offset..offset + rows * cols];
        let path = dir.as_ref().join(format!("{stem}_ch{}.pgm", c + 1));
        fs::write(&path, encode_pgm(slice, rows, cols))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Flat u8 raster of 0/1 entries, one per grid site.
pub fn read_mask(path: impl AsRef<Path>, grid: &Grid) -> Result<Vec<bool>> {
    let bytes = fs::read(path)?;
    decode_mask(&bytes, grid)
}

pub fn decode_mask(bytes: &[u8], grid: &Grid) -> Result<Vec<bool>> {
    if bytes.len() != grid.sites() {
        return Err(Error::Format(format!(
            "mask has {} entries, grid has {}",
            bytes.len(),
            grid.sites()
        )));
    }
    bytes
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Format(format!("mask byte {other} is not 0 or 1"))),
        })
        .collect()
}

pub fn write_mask(path: impl AsRef<Path>, mask: &[bool]) -> Result<()> {
    fs::write(path, mask.iter().map(|&b| b as u8).collect::<Vec<u8>>())?;
    Ok(())
}
