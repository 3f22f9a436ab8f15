//! AdamW with decoupled weight decay and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates per store entry. Buffers keep a
/// one-element placeholder.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |trainable: bool, t: &Tensor<T>| {
            if trainable {
                Tensor::zeros(t.shape())
            } else {
                Tensor::zeros(&[1])
            }
        };
        let m: Vec<_> = store.entries().iter().map(|e| zeros(e.kind.trainable(), &e.value)).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// Applies update number `t` (1-based) to every trainable entry with a
/// gradient. Weight decay shrinks the parameter by `lr * wd` separately from
/// the adaptive step and only touches [`ParamKind::Weight`] entries.
///
/// [`ParamKind::Weight`]: crate::tensor::ParamKind::Weight
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Contract("optimizer step index starts at 1".into()));
    }
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::dim("gradient list does not match the parameter store"));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !g.is_finite() {
                let e = &store.entries()[i];
                let bad = g.data().iter().filter(|v| !v.is_finite()).count();
                return Err(Error::NonFinite(format!(
                    "gradient of {} ({bad} of {} entries)",
                    e.name,
                    g.numel()
                )));
            }
        }
    }
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let kind = store.entry(id).kind;
        let Some(g) = grads[i].as_ref().filter(|_| kind.trainable()) else {
            continue;
        };
        let decay = if kind.decays() { hyper.lr * hyper.weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let theta = store.get_mut(id).data_mut();
        for k in 0..theta.len() {
            let gk = g.data()[k].as_f64();
            let mk = b1 * m[k].as_f64() + (1.0 - b1) * gk;
            let vk = b2 * v[k].as_f64() + (1.0 - b2) * gk * gk;
            m[k] = T::lit(mk);
            v[k] = T::lit(vk);
            let mhat = mk / c1;
            let vhat = vk / c2;
            let mut x = theta[k].as_f64();
            x -= decay * x;
            x -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
            theta[k] = T::lit(x);
        }
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamKind;

    fn hyper(wd: f64) -> AdamHyper {
        AdamHyper {
            lr: 0.01,
            weight_decay: wd,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn decay_skips_biases_and_norms() {
        let mut store = ParamStore::<f64>::new();
        for kind in [ParamKind::Weight, ParamKind::Bias, ParamKind::Norm, ParamKind::Buffer] {
            store.add(format!("{kind:?}"), kind, Tensor::full(&[2], 1.0));
        }
        let grads = vec![Some(Tensor::zeros(&[2])); 4];
        let mut st = AdamState::new(&store);
        adamw_step(&mut store, &grads, &mut st, &hyper(0.5), 1).unwrap();
        let vals: Vec<f64> = store.entries().iter().map(|e| e.value.data()[0]).collect();
        assert_eq!(vals, vec![1.0 - 0.01 * 0.5, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn step_zero_and_bad_gradients_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", ParamKind::Weight, Tensor::full(&[1], 1.0));
        let mut st = AdamState::new(&store);
        let g = vec![Some(Tensor::full(&[1], 1.0))];
        assert!(matches!(adamw_step(&mut store, &g, &mut st, &hyper(0.0), 0), Err(Error::Contract(_))));
        let g = vec![Some(Tensor::full(&[1], f64::NAN))];
        let e = adamw_step(&mut store, &g, &mut st, &hyper(0.0), 1).unwrap_err();
        assert!(matches!(&e, Error::NonFinite(m) if m.contains('w')));
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut g: Vec<Option<Tensor<f64>>> =
            vec![Some(Tensor::from_f64(&[2], &[3.0, 0.0]).unwrap()), None, Some(Tensor::from_f64(&[1], &[4.0]).unwrap())];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap().data()[0] - 0.6).abs() < 1e-15);
        assert!((g[2].as_ref().unwrap().data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut g, 10.0), 1.0);
    }
}
