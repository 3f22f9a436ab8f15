//! Small synthetic datasets for smoke tests and toy training runs.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::derive_seed;
use super::{normalize, to_f32, to_f64, CloudSample, Dataset, LabelMode};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Points on a sphere of radius in `[0.6, 1.0]`.
    Spheres,
    /// Points on the surface of an axis-aligned box, area-uniform.
    Boxes,
    /// Two Gaussian blobs placed symmetrically about the origin.
    TwoClusters,
    /// Cylinder side with part labels 0/1/2 by axial thirds from the lower
    /// end. The axis tilts up to 45 degrees away from +z.
    StripedCylinder,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [
        SynthKind::Spheres,
        SynthKind::Boxes,
        SynthKind::TwoClusters,
        SynthKind::StripedCylinder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Spheres => "spheres",
            SynthKind::Boxes => "boxes",
            SynthKind::TwoClusters => "two-clusters",
            SynthKind::StripedCylinder => "striped-cylinder",
        }
    }

    pub fn is_segmentation(self) -> bool {
        self == SynthKind::StripedCylinder
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown synthetic kind '{s}'")))
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|c| c / n);
        }
    }
}

fn sphere(p: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let r = rng.random_range(0.6..=1.0);
    (0..p).map(|_| unit_vector(rng).map(|c| c * r)).collect()
}

fn boxes(p: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let h: [f64; 3] = [0; 3].map(|_| rng.random_range(0.4..=1.0));
    // a pair of faces normal to axis a has area 2 * 4 h_b h_c
    let area = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
    let total: f64 = area.iter().sum();
    (0..p)
        .map(|_| {
            let mut u = rng.random_range(0.0..total);
            let mut axis = 2;
            for (a, &w) in area.iter().enumerate() {
                if u < w {
                    axis = a;
                    break;
                }
                u -= w;
            }
            let mut q = [0; 3].map(|_| 0.0);
            for (a, v) in q.iter_mut().enumerate() {
                *v = if a == axis {
                    if rng.random_bool(0.5) { h[a] } else { -h[a] }
                } else {
                    rng.random_range(-h[a]..=h[a])
                };
            }
            q
        })
        .collect()
}

fn two_clusters(p: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let dir = unit_vector(rng);
    let d = rng.random_range(0.45..=0.65);
    let noise = Normal::new(0.0, 0.15).expect("positive deviation");
    (0..p)
        .map(|i| {
            let s = if i % 2 == 0 { d } else { -d };
            [0, 1, 2].map(|a| s * dir[a] + noise.sample(rng))
        })
        .collect()
}

/// Point `i` lies in third `i % 3`, so every label is present once `p >= 3`.
fn striped_cylinder(p: usize, rng: &mut ChaCha8Rng) -> (Vec<[f64; 3]>, Vec<u32>) {
    // a bounded tilt keeps "lower end" well defined; a free axis direction
    // would make parts 0 and 2 interchangeable
    let tilt = rng.random_range(0.0..std::f64::consts::FRAC_PI_4);
    let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    let axis = [tilt.sin() * azimuth.cos(), tilt.sin() * azimuth.sin(), tilt.cos()];
    let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    };
    let e1 = {
        let c = cross(axis, helper);
        let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        c.map(|v| v / n)
    };
    let e2 = cross(axis, e1);
    let radius = rng.random_range(0.25..=0.4);
    let half = 1.0;
    let mut pts = Vec::with_capacity(p);
    let mut labels = Vec::with_capacity(p);
    for i in 0..p {
        let label = (i % 3) as u32;
        let lo = -half + 2.0 * half * label as f64 / 3.0;
        let t = rng.random_range(lo..lo + 2.0 * half / 3.0);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let (s, c) = theta.sin_cos();
        pts.push([0, 1, 2].map(|a| t * axis[a] + radius * (c * e1[a] + s * e2[a])));
        labels.push(label);
    }
    (pts, labels)
}

/// One raw (unnormalized) sample; `category` is left at 0.
pub fn synth(kind: SynthKind, p: usize, seed: u64) -> CloudSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pts, parts) = match kind {
        SynthKind::Spheres => (sphere(p, &mut rng), None),
        SynthKind::Boxes => (boxes(p, &mut rng), None),
        SynthKind::TwoClusters => (two_clusters(p, &mut rng), None),
        SynthKind::StripedCylinder => {
            let (x, l) = striped_cylinder(p, &mut rng);
            (x, Some(l))
        }
    };
    CloudSample {
        points: to_f32(&pts),
        category: 0,
        parts,
    }
}

/// `count` normalized samples; sample `i` is of kind `kinds[i % kinds.len()]`.
/// Classification kinds get class label = position in `kinds`; a
/// segmentation kind must be the only kind and yields part labels with
/// category 0.
pub fn synth_dataset(kinds: &[SynthKind], count: usize, p: usize, seed: u64) -> Result<Dataset> {
    if kinds.is_empty() || p == 0 {
        return Err(Error::Config("synthetic dataset needs kinds and a positive point count".into()));
    }
    let seg = kinds.iter().filter(|k| k.is_segmentation()).count();
    let mode = match seg {
        0 => LabelMode::Class,
        _ if kinds.len() == 1 => LabelMode::Parts,
        _ => return Err(Error::Config("segmentation kinds cannot be mixed with others".into())),
    };
    let samples = (0..count)
        .map(|i| {
            let c = i % kinds.len();
            let mut s = synth(kinds[c], p, derive_seed(seed, i as u64));
            s.points = to_f32(&normalize(&to_f64(&s.points)));
            if mode == LabelMode::Class {
                s.category = c as u32;
            }
            s
        })
        .collect();
    Dataset::new(p, mode, samples)
}
