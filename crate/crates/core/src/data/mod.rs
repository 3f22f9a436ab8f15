//! Point cloud datasets: samples, normalization, resampling, batching and
//! file formats.

mod binary;
mod manifest;
mod ply;
pub mod synth;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use binary::{read_binary, write_binary, BINARY_MAGIC, BINARY_VERSION};
pub use manifest::{derive_seed, load_manifest, DatasetManifest, ManifestEntry};
pub use ply::{read_ply, read_ply_cloud, write_ply, PlyTable};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::transfer::ParticleLayout;

/// Which labels a dataset carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    None,
    /// One class per sample.
    Class,
    /// A category per sample and a part label per point.
    Parts,
}

impl LabelMode {
    pub(crate) fn code(self) -> u8 {
        match self {
            LabelMode::None => 0,
            LabelMode::Class => 1,
            LabelMode::Parts => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(LabelMode::None),
            1 => Some(LabelMode::Class),
            2 => Some(LabelMode::Parts),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CloudSample {
    pub points: Vec<[f32; 3]>,
    /// Class label, or object category for part-labelled samples.
    pub category: u32,
    pub parts: Option<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub points_per_sample: usize,
    pub label_mode: LabelMode,
    pub samples: Vec<CloudSample>,
}

impl Dataset {
    pub fn new(points_per_sample: usize, label_mode: LabelMode, samples: Vec<CloudSample>) -> Result<Self> {
        if points_per_sample == 0 {
            return Err(Error::Data("points per sample must be positive".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.points.len() != points_per_sample {
                return Err(Error::Data(format!(
                    "sample {i} has {} points, expected {points_per_sample}",
                    s.points.len()
                )));
            }
            match (label_mode, &s.parts) {
                (LabelMode::Parts, Some(p)) if p.len() == points_per_sample => {}
                (LabelMode::Parts, _) => {
                    return Err(Error::Data(format!("sample {i} lacks one part label per point")));
                }
                (_, Some(_)) => return Err(Error::Data(format!("sample {i} has unexpected part labels"))),
                _ => {}
            }
        }
        Ok(Self {
            points_per_sample,
            label_mode,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fails with a data error if any class (class mode) or part label
    /// (parts mode) is `>= num_labels`.
    pub fn check_labels(&self, num_labels: usize) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            let bad = match self.label_mode {
                LabelMode::None => None,
                LabelMode::Class => (s.category as usize >= num_labels).then_some(s.category),
                LabelMode::Parts => s.parts.iter().flatten().copied().find(|&l| l as usize >= num_labels),
            };
            if let Some(l) = bad {
                return Err(Error::Data(format!("sample {i}: label {l} out of range for {num_labels} labels")));
            }
        }
        Ok(())
    }

    /// Largest label + 1 (classes or parts by mode), 0 when unlabeled.
    pub fn label_count(&self) -> usize {
        let max = self
            .samples
            .iter()
            .filter_map(|s| match self.label_mode {
                LabelMode::None => None,
                LabelMode::Class => Some(s.category),
                LabelMode::Parts => s.parts.iter().flatten().copied().max(),
            })
            .max();
        max.map_or(0, |m| m as usize + 1)
    }
}

/// Translates the bounding-box center to the origin and scales uniformly so
/// the longest axis spans `[-1, 1]`. A cloud with no extent maps to the
/// origin.
pub fn normalize(points: &[[f64; 3]]) -> Vec<[f64; 3]> {
    if points.is_empty() {
        return Vec::new();
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let center = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
    let half = (0..3).map(|a| 0.5 * (hi[a] - lo[a])).fold(0.0, f64::max);
    if half <= 0.0 {
        return vec![[0.0; 3]; points.len()];
    }
    points
        .iter()
        .map(|p| [0, 1, 2].map(|a| ((p[a] - center[a]) / half).clamp(-1.0, 1.0)))
        .collect()
}

pub fn to_f64(points: &[[f32; 3]]) -> Vec<[f64; 3]> {
    points.iter().map(|p| p.map(f64::from)).collect()
}

pub fn to_f32(points: &[[f64; 3]]) -> Vec<[f32; 3]> {
    points.iter().map(|p| p.map(|v| v as f32)).collect()
}

/// Indices of `target` rows drawn from `source` rows: without replacement
/// when there are enough, with replacement otherwise. Identity when equal.
pub fn resample_indices(source: usize, target: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if source == 0 {
        return Err(Error::Data("cannot resample an empty cloud".into()));
    }
    Ok(if source == target {
        (0..source).collect()
    } else if source > target {
        let mut idx = index::sample(rng, source, target).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..target).map(|_| rng.random_range(0..source)).collect()
    })
}

/// Points and labels of several clouds stacked for one forward pass.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[B*P, 3]`.
    pub points: Tensor<T>,
    pub layout: ParticleLayout,
    /// Class or category per sample.
    pub categories: Vec<usize>,
    /// Part label per point, empty without part labels.
    pub parts: Vec<usize>,
}

impl<T: Real> Batch<T> {
    /// Stacks clouds given in f64; `clouds[i]` belongs to `samples[i]`.
    pub fn assemble(clouds: &[Vec<[f64; 3]>], samples: &[&CloudSample]) -> Result<Self> {
        let p = clouds.first().map_or(0, |c| c.len());
        if clouds.is_empty() || p == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        let mut data = Vec::with_capacity(clouds.len() * p * 3);
        let mut parts = Vec::new();
        for (c, s) in clouds.iter().zip(samples) {
            if c.len() != p {
                return Err(Error::dim("clouds in a batch must share a point count"));
            }
            data.extend(c.iter().flatten().map(|&v| T::lit(v)));
            if let Some(pl) = &s.parts {
                parts.extend(pl.iter().map(|&l| l as usize));
            }
        }
        Ok(Self {
            points: Tensor::new(vec![clouds.len() * p, 3], data)?,
            layout: ParticleLayout {
                batch: clouds.len(),
                particles: p,
            },
            categories: samples.iter().map(|s| s.category as usize).collect(),
            parts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn normalize_examples() {
        let corners: Vec<[f64; 3]> = (0..8)
            .map(|c| [0, 1, 2].map(|a| if c >> a & 1 == 1 { 1.0 } else { -1.0 }))
            .collect();
        assert_eq!(normalize(&corners), corners);
        let pts = vec![[0.0, 0.0, 0.0], [2.0, 1.0, 1.0], [1.0, 0.5, 0.25]];
        let n = normalize(&pts);
        assert_eq!(n[0], [-1.0, -0.5, -0.5]);
        assert_eq!(n[1], [1.0, 0.5, 0.5]);
        assert_eq!(normalize(&[[3.0, 4.0, 5.0]]), vec![[0.0; 3]]);
    }

    #[test]
    fn resampling_modes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let down = resample_indices(10, 4, &mut rng).unwrap();
        assert_eq!(down.len(), 4);
        let mut d = down.clone();
        d.dedup();
        assert_eq!(d.len(), 4);
        let up = resample_indices(3, 8, &mut rng).unwrap();
        assert_eq!(up.len(), 8);
        assert!(up.iter().all(|&i| i < 3));
        assert_eq!(resample_indices(5, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(resample_indices(0, 5, &mut rng).is_err());
    }

    #[test]
    fn dataset_validation() {
        let s = CloudSample {
            points: vec![[0.0; 3]; 2],
            category: 4,
            parts: None,
        };
        assert!(Dataset::new(3, LabelMode::Class, vec![s.clone()]).is_err());
        assert!(Dataset::new(2, LabelMode::Parts, vec![s.clone()]).is_err());
        let d = Dataset::new(2, LabelMode::Class, vec![s]).unwrap();
        assert!(matches!(d.check_labels(4), Err(Error::Data(_))));
        assert!(d.check_labels(5).is_ok());
        assert_eq!(d.label_count(), 5);
    }
}
