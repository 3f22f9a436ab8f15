//! Flat binary dataset files.
//!
//! Layout, all little-endian: magic `ADVP`, version `u32`, sample count
//! `u32`, points per sample `u32`, label mode `u8`; then per sample `P`
//! float triples followed by its labels (mode 1: class `u32`; mode 2:
//! category `u32` then `P` part labels `u32`).

use std::fs;
use std::path::Path;

use super::{CloudSample, Dataset, LabelMode};
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"ADVP";
pub const BINARY_VERSION: u32 = 1;

pub fn write_binary(path: &Path, data: &Dataset) -> Result<()> {
    let p = data.points_per_sample;
    let mut out = Vec::with_capacity(17 + data.len() * p * 16);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(&(p as u32).to_le_bytes());
    out.push(data.label_mode.code());
    for s in &data.samples {
        for v in s.points.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match data.label_mode {
            LabelMode::None => {}
            LabelMode::Class => out.extend_from_slice(&s.category.to_le_bytes()),
            LabelMode::Parts => {
                out.extend_from_slice(&s.category.to_le_bytes());
                for l in s.parts.iter().flatten() {
                    out.extend_from_slice(&l.to_le_bytes());
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {} (needed {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses the whole file before returning, so a damaged file yields an
/// error and no samples.
pub fn read_binary(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != BINARY_MAGIC {
        return Err(Error::format(path, "bad magic, not a dataset file"));
    }
    let version = r.u32()?;
    if version != BINARY_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let p = r.u32()? as usize;
    let mode_code = r.take(1)?[0];
    let mode = LabelMode::from_code(mode_code)
        .ok_or_else(|| Error::format(path, format!("unknown label mode {mode_code}")))?;
    if p == 0 {
        return Err(Error::format(path, "zero points per sample"));
    }
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let mut points = Vec::with_capacity(p);
        for _ in 0..p {
            points.push([r.f32()?, r.f32()?, r.f32()?]);
        }
        let (category, parts) = match mode {
            LabelMode::None => (0, None),
            LabelMode::Class => (r.u32()?, None),
            LabelMode::Parts => {
                let c = r.u32()?;
                let parts = (0..p).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                (c, Some(parts))
            }
        };
        samples.push(CloudSample {
            points,
            category,
            parts,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Dataset::new(p, mode, samples)
}
