//! Multiscale per-particle descriptor used to seed particle features.
//!
//! At each scale the unit domain is cut into `N^3` cells. Every particle
//! records the center of mass of its cell and the unit vector pointing from
//! itself to that center. Scales run over `N = 2, 4, .., 12`, giving six
//! `[center, direction]` blocks of six numbers each.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const SCALES: [usize; 6] = [2, 4, 6, 8, 10, 12];
pub const DESCRIPTOR_WIDTH: usize = 6 * SCALES.len();

/// Directions shorter than this are emitted as the zero vector.
const DEGENERATE: f64 = 1e-8;

/// Cell index of coordinate `x` at `n` cells per axis, with `x = 1` in the
/// last cell and out-of-domain values clamped to the boundary cells.
pub fn cell_index(x: f64, n: usize) -> usize {
    let i = ((x + 1.0) * 0.5 * n as f64).floor();
    if i <= 0.0 {
        0
    } else {
        (i as usize).min(n - 1)
    }
}

/// Descriptor of one cloud given as `[P, 3]` rows; returns `[P, 36]`.
pub fn multiscale_descriptor<T: Real>(positions: &Tensor<T>) -> Result<Tensor<T>> {
    if positions.rank() != 2 || positions.shape()[1] != 3 {
        return Err(Error::dim(format!("positions must be [P, 3], got {:?}", positions.shape())));
    }
    let pts: Vec<[f64; 3]> = positions
        .data()
        .chunks_exact(3)
        .map(|r| [r[0].as_f64(), r[1].as_f64(), r[2].as_f64()])
        .collect();
    let mut out = vec![T::zero(); pts.len() * DESCRIPTOR_WIDTH];
    for (s, &n) in SCALES.iter().enumerate() {
        let cells: Vec<usize> = pts
            .iter()
            .map(|p| (cell_index(p[0], n) * n + cell_index(p[1], n)) * n + cell_index(p[2], n))
            .collect();
        let mut sum = vec![[0.0f64; 3]; n * n * n];
        let mut count = vec![0usize; n * n * n];
        for (p, &c) in pts.iter().zip(&cells) {
            count[c] += 1;
            for a in 0..3 {
                sum[c][a] += p[a];
            }
        }
        for (i, (p, &c)) in pts.iter().zip(&cells).enumerate() {
            let center = sum[c].map(|v| v / count[c] as f64);
            let d = [center[0] - p[0], center[1] - p[1], center[2] - p[2]];
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let block = &mut out[i * DESCRIPTOR_WIDTH + s * 6..i * DESCRIPTOR_WIDTH + s * 6 + 6];
            for a in 0..3 {
                block[a] = T::lit(center[a]);
                block[3 + a] = if len < DEGENERATE { T::zero() } else { T::lit(d[a] / len) };
            }
        }
    }
    Tensor::new(vec![pts.len(), DESCRIPTOR_WIDTH], out)
}
