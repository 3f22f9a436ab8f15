//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use advectant::tensor::Tensor;
use advectant::transfer::GridSpec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Tent-function weight of node `(i, j, k)` for a particle at `x`, evaluated
/// over the whole grid rather than through a cell lookup.
pub fn hat(spec: &GridSpec, x: [f64; 3], i: usize, j: usize, k: usize) -> f64 {
    let node = spec.node_position(i, j, k);
    let h = spec.spacing();
    (0..3).map(|a| (1.0 - (x[a] - node[a]).abs() / h).max(0.0)).product()
}

pub fn random_positions(rng: &mut ChaCha8Rng, p: usize, reach: f64) -> Vec<[f64; 3]> {
    (0..p)
        .map(|_| [0, 1, 2].map(|_| rng.random_range(-reach..reach)))
        .collect()
}

pub fn to_tensor(rows: &[[f64; 3]]) -> Tensor<f64> {
    Tensor::from_f64(&[rows.len(), 3], &rows.concat()).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn oracle_scatter(spec: &GridSpec, x: &[[f64; 3]], q: &[f64], c: usize, masses: Option<&[f64]>) -> Vec<f64> {
    let n = spec.resolution();
    let mut num = vec![0.0; c * n * n * n];
    let mut den = vec![0.0; n * n * n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let node = spec.node_index(i, j, k);
                for (p, &xp) in x.iter().enumerate() {
                    let w = hat(spec, xp, i, j, k) * masses.map_or(1.0, |m| m[p]);
                    den[node] += w;
                    for ch in 0..c {
                        num[ch * n * n * n + node] += w * q[p * c + ch];
                    }
                }
            }
        }
    }
    if masses.is_some() {
        for ch in 0..c {
            for node in 0..n * n * n {
                num[ch * n * n * n + node] /= den[node].max(1e-8);
            }
        }
    }
    num
}

pub fn oracle_gather(spec: &GridSpec, x: &[[f64; 3]], g: &[f64], c: usize) -> Vec<f64> {
    let n = spec.resolution();
    let mut out = vec![0.0; x.len() * c];
    for (p, &xp) in x.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let w = hat(spec, xp, i, j, k);
                    for ch in 0..c {
                        out[p * c + ch] += w * g[ch * n * n * n + spec.node_index(i, j, k)];
                    }
                }
            }
        }
    }
    out
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}

