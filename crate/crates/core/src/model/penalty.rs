//! Training losses: label-smoothed cross-entropy and the particle
//! boundary, gather and diffusion penalties.

use super::{Forward, ModelConfig, Task};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::transfer::ParticleLayout;

/// Mean over rows of `-sum_c t_c log softmax(z)_c`, where the target puts
/// `confidence` on the true class and spreads the rest evenly.
pub fn smoothed_cross_entropy<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
    confidence: f64,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::dim(format!("logits {shape:?} for {} targets", targets.len())));
    }
    let (rows, classes) = (shape[0], shape[1]);
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Input(format!("target {t} out of range for {classes} classes")));
    }
    let (on, off) = if classes == 1 {
        (1.0, 0.0)
    } else {
        (confidence, (1.0 - confidence) / (classes - 1) as f64)
    };
    let mut dist = vec![T::lit(off); rows * classes];
    for (r, &t) in targets.iter().enumerate() {
        dist[r * classes + t] = T::lit(on);
    }
    let dist = tape.constant(Tensor::new(shape, dist)?);
    let logp = tape.log_softmax(logits)?;
    let weighted = tape.mul(logp, dist)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, T::lit(-1.0 / rows as f64))
}

/// `(1/n) sum_p max(0, |x_p| - 1)` over all particles.
pub fn boundary_penalty<T: Real>(tape: &mut Tape<T>, positions: Var) -> Result<Var> {
    let norms = tape.row_norm(positions)?;
    let excess = tape.add_scalar(norms, -T::one())?;
    let outside = tape.relu(excess)?;
    tape.mean(outside)
}

fn segments(labels: &[usize], layout: ParticleLayout, num_labels: usize) -> Result<Vec<usize>> {
    if labels.len() != layout.rows() {
        return Err(Error::dim(format!("{} labels for {} particles", labels.len(), layout.rows())));
    }
    labels
        .iter()
        .enumerate()
        .map(|(r, &l)| {
            if l >= num_labels {
                Err(Error::Input(format!("label {l} out of range for {num_labels} labels")))
            } else {
                Ok(layout.sample_of(r) * num_labels + l)
            }
        })
        .collect()
}

/// `1/2 sum_{l != m} max(0, 1 - |c_l - c_m|)` over the label centers of each
/// sample, averaged over samples.
pub fn gather_penalty<T: Real>(
    tape: &mut Tape<T>,
    positions: Var,
    labels: &[usize],
    layout: ParticleLayout,
    num_labels: usize,
) -> Result<Var> {
    let seg = segments(labels, layout, num_labels)?;
    let mut present = vec![false; layout.batch * num_labels];
    for &s in &seg {
        present[s] = true;
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for s in 0..layout.batch {
        let ids: Vec<usize> = (s * num_labels..(s + 1) * num_labels).filter(|&i| present[i]).collect();
        for &l in &ids {
            for &m in &ids {
                if l != m {
                    a.push(l);
                    b.push(m);
                }
            }
        }
    }
    if a.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let centers = tape.segment_mean(positions, &seg, layout.batch * num_labels)?;
    let ca = tape.gather_rows(centers, &a)?;
    let cb = tape.gather_rows(centers, &b)?;
    let diff = tape.sub(ca, cb)?;
    let dist = tape.row_norm(diff)?;
    let neg = tape.scale(dist, -T::one())?;
    let gap = tape.add_scalar(neg, T::one())?;
    let hinge = tape.relu(gap)?;
    let total = tape.sum(hinge)?;
    tape.scale(total, T::lit(0.5 / layout.batch as f64))
}

/// `(1/n) sum_p |c_{l(p)} - x_p|` with centers per sample and label.
pub fn diffusion_penalty<T: Real>(
    tape: &mut Tape<T>,
    positions: Var,
    labels: &[usize],
    layout: ParticleLayout,
    num_labels: usize,
) -> Result<Var> {
    let seg = segments(labels, layout, num_labels)?;
    let centers = tape.segment_mean(positions, &seg, layout.batch * num_labels)?;
    let own = tape.gather_rows(centers, &seg)?;
    let diff = tape.sub(own, positions)?;
    let dist = tape.row_norm(diff)?;
    tape.mean(dist)
}

/// Class per sample, or part label per point in input order.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    Parts(&'a [usize]),
}

/// Total loss and its terms (as plain numbers, for logging).
pub struct LossParts {
    pub total: Var,
    pub cross_entropy: f64,
    pub boundary: f64,
    pub gather: f64,
    pub diffusion: f64,
}

/// Smoothed cross-entropy plus the weighted penalties for the task.
/// Gather and diffusion terms apply to segmentation only.
pub fn loss<T: Real>(tape: &mut Tape<T>, fwd: &Forward, targets: Targets<'_>, config: &ModelConfig) -> Result<LossParts> {
    let labels = match (config.task, targets) {
        (Task::Classification, Targets::Classes(t)) | (Task::Segmentation, Targets::Parts(t)) => t,
        _ => return Err(Error::Contract("targets do not match the model task".into())),
    };
    let ce = smoothed_cross_entropy(tape, fwd.logits, labels, config.label_confidence)?;
    let b = boundary_penalty(tape, fwd.positions)?;
    let mut terms = vec![(ce, 1.0), (b, config.lambda_boundary)];
    let (mut gather, mut diffusion) = (0.0, 0.0);
    if config.task == Task::Segmentation {
        let g = gather_penalty(tape, fwd.positions, labels, fwd.layout, config.num_classes)?;
        let d = diffusion_penalty(tape, fwd.positions, labels, fwd.layout, config.num_classes)?;
        gather = tape.value(g).item().as_f64();
        diffusion = tape.value(d).item().as_f64();
        terms.push((g, config.lambda_gather));
        terms.push((d, config.lambda_diffusion));
    }
    let mut total = ce;
    for &(v, w) in &terms[1..] {
        if w != 0.0 {
            let s = tape.scale(v, T::lit(w))?;
            total = tape.add(total, s)?;
        }
    }
    Ok(LossParts {
        total,
        cross_entropy: tape.value(ce).item().as_f64(),
        boundary: tape.value(b).item().as_f64(),
        gather,
        diffusion,
    })
}
