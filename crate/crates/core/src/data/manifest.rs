//! JSON dataset manifests listing PLY or binary files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize, read_binary, read_ply_cloud, resample_indices, to_f32, to_f64, CloudSample, Dataset, LabelMode};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory. `.ply` or `.advp`.
    pub path: PathBuf,
    /// Class or category of a PLY cloud.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub points_per_sample: usize,
    pub label_mode: LabelMode,
    /// Seeds resampling of clouds whose point count differs.
    pub seed: u64,
    /// When set, labels `>= num_labels` are rejected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_labels: Option<usize>,
    pub files: Vec<ManifestEntry>,
}

/// Mixes a base seed with an index into an independent stream seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Normalizes a raw cloud and resamples it (and its labels) to `p` points.
fn conform(
    points: &[[f32; 3]],
    parts: Option<&[u32]>,
    p: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<[f32; 3]>, Option<Vec<u32>>)> {
    let idx = resample_indices(points.len(), p, rng)?;
    let norm = normalize(&to_f64(points));
    let picked: Vec<[f64; 3]> = idx.iter().map(|&i| norm[i]).collect();
    Ok((to_f32(&picked), parts.map(|l| idx.iter().map(|&i| l[i]).collect())))
}

/// Reads every listed file, normalizes each cloud to `[-1,1]^3` and
/// resamples it to the manifest's point count.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let p = m.points_per_sample;
    let mut samples = Vec::new();
    for (i, entry) in m.files.iter().enumerate() {
        let file = dir.join(&entry.path);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(m.seed, i as u64));
        let ext = file.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("ply") => {
                let (points, labels) = read_ply_cloud(&file)?;
                let category = match (m.label_mode, entry.category) {
                    (LabelMode::None, c) => c.unwrap_or(0),
                    (_, Some(c)) => c,
                    (_, None) => {
                        return Err(Error::Data(format!("{}: manifest entry needs a category", file.display())))
                    }
                };
                if m.label_mode == LabelMode::Parts && labels.is_none() {
                    return Err(Error::Data(format!("{}: no per-vertex label property", file.display())));
                }
                let labels = labels.filter(|_| m.label_mode == LabelMode::Parts);
                let (points, parts) = conform(&points, labels.as_deref(), p, &mut rng)?;
                samples.push(CloudSample {
                    points,
                    category,
                    parts,
                });
            }
            Some("advp") | Some("bin") => {
                let ds = read_binary(&file)?;
                if m.label_mode != LabelMode::None && ds.label_mode != m.label_mode {
                    return Err(Error::Data(format!(
                        "{}: file labels are {:?}, manifest expects {:?}",
                        file.display(),
                        ds.label_mode,
                        m.label_mode
                    )));
                }
                for s in ds.samples {
                    let keep = if m.label_mode == LabelMode::Parts { s.parts.as_deref() } else { None };
                    let (points, parts) = conform(&s.points, keep, p, &mut rng)?;
                    samples.push(CloudSample {
                        points,
                        category: entry.category.unwrap_or(s.category),
                        parts,
                    });
                }
            }
            _ => return Err(Error::format(&file, "unknown extension, expected .ply or .advp")),
        }
    }
    let ds = Dataset::new(p, m.label_mode, samples)?;
    if let Some(n) = m.num_labels {
        ds.check_labels(n)?;
    }
    Ok(ds)
}
