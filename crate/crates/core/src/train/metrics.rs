//! Accuracy and part-segmentation IoU.

use std::collections::BTreeMap;

use crate::data::{Dataset, LabelMode};

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hit = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hit as f64 / truth.len() as f64
}

/// Mean IoU over `parts` for one shape. A part absent from both prediction
/// and ground truth scores 1.
pub fn shape_iou(pred: &[usize], truth: &[usize], parts: &[usize]) -> f64 {
    if parts.is_empty() {
        return 1.0;
    }
    let total: f64 = parts
        .iter()
        .map(|&l| {
            let mut inter = 0usize;
            let mut union = 0usize;
            for (&p, &t) in pred.iter().zip(truth) {
                let (a, b) = (p == l, t == l);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    total / parts.len() as f64
}

/// Part labels seen per category in a part-labelled dataset, sorted.
pub fn category_parts(data: &Dataset) -> BTreeMap<u32, Vec<usize>> {
    let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    if data.label_mode != LabelMode::Parts {
        return map;
    }
    for s in &data.samples {
        let e = map.entry(s.category).or_default();
        e.extend(s.parts.iter().flatten().map(|&l| l as usize));
        e.sort_unstable();
        e.dedup();
    }
    map
}

/// Index of the largest entry among `allowed` (all entries when empty).
/// Ties resolve to the lowest index.
pub fn restricted_argmax(row: &[f64], allowed: &[usize]) -> usize {
    let mut best = None::<(usize, f64)>;
    let mut consider = |i: usize| {
        if best.is_none_or(|(_, v)| row[i] > v) {
            best = Some((i, row[i]));
        }
    };
    if allowed.is_empty() {
        (0..row.len()).for_each(&mut consider);
    } else {
        allowed.iter().copied().filter(|&i| i < row.len()).for_each(&mut consider);
    }
    best.map_or(0, |(i, _)| i)
}
