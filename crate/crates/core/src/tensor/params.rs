//! Named parameter storage and its on-disk form.
//!
//! A parameter file pair is `<stem>.bin`, a flat run of little-endian `f32`
//! values, and `<stem>.json`, a manifest mapping each parameter path to its
//! shape and element offset into the binary file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a stored tensor; decides optimizer treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Trained with weight decay.
    Weight,
    /// Trained, no weight decay.
    Bias,
    /// Batch-norm scale/shift: trained, no weight decay.
    Norm,
    /// Running statistics: never trained.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: ParamKind,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dtype: String,
    pub total: usize,
    pub tensors: BTreeMap<String, ManifestRecord>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let mut tensors = BTreeMap::new();
        for e in &self.entries {
            tensors.insert(
                e.name.clone(),
                ManifestRecord {
                    shape: e.value.shape().to_vec(),
                    offset,
                    kind: e.kind,
                },
            );
            offset += e.value.numel();
        }
        Manifest {
            dtype: "f32-le".to_string(),
            total: offset,
            tensors,
        }
    }

    /// Writes `<stem>.bin` and `<stem>.json` in `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut bytes = Vec::new();
        for e in &self.entries {
            for &v in e.value.data() {
                bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        let bin = dir.join(format!("{stem}.bin"));
        let json = dir.join(format!("{stem}.json"));
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let text = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }

    /// Overwrites every entry of this store from `<stem>.{bin,json}`.
    ///
    /// Each entry must be present with a matching shape; extra records in
    /// the file are rejected so stale checkpoints do not load silently.
    pub fn load_into(&mut self, dir: &Path, stem: &str) -> Result<()> {
        let bin = dir.join(format!("{stem}.bin"));
        let json = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if manifest.dtype != "f32-le" {
            return Err(Error::format(&json, format!("unsupported dtype {}", manifest.dtype)));
        }
        if bytes.len() != manifest.total * 4 {
            return Err(Error::format(
                &bin,
                format!("expected {} bytes, found {}", manifest.total * 4, bytes.len()),
            ));
        }
        if manifest.tensors.len() != self.entries.len() {
            return Err(Error::format(
                &json,
                format!(
                    "manifest has {} tensors, model expects {}",
                    manifest.tensors.len(),
                    self.entries.len()
                ),
            ));
        }
        for e in &mut self.entries {
            let rec = manifest
                .tensors
                .get(&e.name)
                .ok_or_else(|| Error::format(&json, format!("missing tensor {}", e.name)))?;
            if rec.shape != e.value.shape() {
                return Err(Error::format(
                    &json,
                    format!("{}: shape {:?}, expected {:?}", e.name, rec.shape, e.value.shape()),
                ));
            }
            let n = e.value.numel();
            if (rec.offset + n) * 4 > bytes.len() {
                return Err(Error::format(&bin, format!("{} runs past end of file", e.name)));
            }
            let src = &bytes[rec.offset * 4..(rec.offset + n) * 4];
            for (dst, chunk) in e.value.data_mut().iter_mut().zip(src.chunks_exact(4)) {
                let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
                *dst = T::lit(v as f64);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", ParamKind::Weight, Tensor::from_f64(&[2, 2], &[1.0, -2.5, 3.25, 1e-7]).unwrap());
        s.add("a.bias", ParamKind::Bias, Tensor::from_f64(&[2], &[0.5, 0.25]).unwrap());
        s.add("bn.running_mean", ParamKind::Buffer, Tensor::from_f64(&[1], &[9.0]).unwrap());
        s
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        s.save(dir.path(), "params").unwrap();
        let mut t = sample();
        for id in t.ids().collect::<Vec<_>>() {
            t.get_mut(id).data_mut().fill(0.0);
        }
        t.load_into(dir.path(), "params").unwrap();
        for (a, b) in s.entries().iter().zip(t.entries()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(s.trainable_count(), 6);
    }

    #[test]
    fn manifest_offsets_follow_insertion_order() {
        let m = sample().manifest();
        assert_eq!(m.tensors["a.weight"].offset, 0);
        assert_eq!(m.tensors["a.bias"].offset, 4);
        assert_eq!(m.tensors["bn.running_mean"].offset, 6);
        assert_eq!(m.total, 7);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path(), "p").unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add("a.weight", ParamKind::Weight, Tensor::zeros(&[4]));
        other.add("a.bias", ParamKind::Bias, Tensor::zeros(&[2]));
        other.add("bn.running_mean", ParamKind::Buffer, Tensor::zeros(&[1]));
        assert!(matches!(other.load_into(dir.path(), "p"), Err(Error::Format { .. })));
    }
}
