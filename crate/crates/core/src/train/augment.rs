use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::normalize;
use crate::error::{Error, Result};

/// Training-time perturbation of a cloud. Applied in order: rotation about
/// the vertical (z) axis, per-axis scaling, clipped Gaussian jitter, then
/// renormalization to `[-1,1]^3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub rotate: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rotate: true,
            scale_min: 0.8,
            scale_max: 1.2,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && self.jitter_sigma >= 0.0
            && self.jitter_clip >= 0.0
            && self.scale_max.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation settings {self:?}")))
        }
    }
}

pub fn augment(cloud: &[[f64; 3]], cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    if !cfg.enabled {
        return cloud.to_vec();
    }
    let (s, c) = if cfg.rotate {
        rng.random_range(0.0..std::f64::consts::TAU).sin_cos()
    } else {
        (0.0, 1.0)
    };
    let scale: [f64; 3] = [0; 3].map(|_| {
        if cfg.scale_max > cfg.scale_min {
            rng.random_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        }
    });
    let noise = (cfg.jitter_sigma > 0.0).then(|| Normal::new(0.0, cfg.jitter_sigma).expect("positive sigma"));
    let moved: Vec<[f64; 3]> = cloud
        .iter()
        .map(|p| {
            let r = [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
            [0, 1, 2].map(|a| {
                let j = noise
                    .as_ref()
                    .map_or(0.0, |n| n.sample(rng).clamp(-cfg.jitter_clip, cfg.jitter_clip));
                r[a] * scale[a] + j
            })
        })
        .collect();
    normalize(&moved)
}
