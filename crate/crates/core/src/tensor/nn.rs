//! Layers over a [`ParamStore`] and the per-forward binding context.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamKind, ParamStore, Real, Tape, Tensor, Var};
use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;

/// Settings for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardMode {
    pub training: bool,
    /// Weight of the new batch statistic in the running-average update.
    pub bn_momentum: f64,
    /// Whether trainable parameters are recorded as gradient leaves.
    pub grad: bool,
    /// Seed for dropout masks; dropout is a no-op without one.
    pub dropout_seed: Option<u64>,
}

impl ForwardMode {
    pub fn train(bn_momentum: f64, dropout_seed: u64) -> Self {
        Self {
            training: true,
            bn_momentum,
            grad: true,
            dropout_seed: Some(dropout_seed),
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            bn_momentum: 0.0,
            grad: false,
            dropout_seed: None,
        }
    }
}

/// Binds stored parameters onto a fresh [`Tape`] on first use and collects
/// running-statistics updates for later commit.
pub struct Ctx<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: ForwardMode,
    pending: HashMap<ParamId, Tensor<T>>,
    rng: Option<ChaCha8Rng>,
}

impl<'s, T: Real> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: ForwardMode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            pending: HashMap::new(),
            rng: mode.dropout_seed.map(ChaCha8Rng::seed_from_u64),
        }
    }

    pub fn training(&self) -> bool {
        self.mode.training
    }

    pub fn mode(&self) -> ForwardMode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let entry = self.store.entry(id);
        let grad = self.mode.grad && entry.kind.trainable();
        let v = self.tape.leaf(entry.value.clone(), grad);
        self.bound[id.index()] = Some(v);
        v
    }

    /// Current value of a buffer, including updates made earlier in this pass.
    pub fn buffer(&self, id: ParamId) -> &Tensor<T> {
        self.pending.get(&id).unwrap_or_else(|| self.store.get(id))
    }

    pub fn set_buffer(&mut self, id: ParamId, value: Tensor<T>) {
        self.pending.insert(id, value);
    }

    /// Gradients of every store entry after `tape.backward`, indexed like the
    /// store. Entries that were unused or are buffers yield `None`.
    pub fn gradients(&self) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v).cloned()))
            .collect()
    }

    /// Pending running-statistics values, to be written back with
    /// [`commit_buffers`].
    pub fn into_buffer_updates(self) -> Vec<(ParamId, Tensor<T>)> {
        let mut v: Vec<_> = self.pending.into_iter().collect();
        v.sort_by_key(|(id, _)| id.index());
        v
    }

    /// Applies inverted dropout with drop probability `p` in training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.mode.training || p <= 0.0 {
            return Ok(x);
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        let n = self.tape.value(x).numel();
        let keep = T::lit(1.0 / (1.0 - p));
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.tape.dropout_mask(x, mask)
    }
}

pub fn commit_buffers<T: Real>(store: &mut ParamStore<T>, updates: Vec<(ParamId, Tensor<T>)>) {
    for (id, v) in updates {
        *store.get_mut(id) = v;
    }
}

fn uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Fully connected layer over rows: `[rows, cin] -> [rows, cout]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    /// Uniform init in `±1/sqrt(cin)` for weights and bias.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, uniform(rng, &[cout, cin], bound));
        let bias = store.add(format!("{name}.bias"), ParamKind::Bias, uniform(rng, &[cout], bound));
        Self { weight, bias, cin, cout }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        ctx.tape.linear(x, w, Some(b))
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin + self.cout
    }
}

/// 3D convolution with a cubic odd kernel and "same" zero padding.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv3d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            uniform(rng, &[cout, cin, kernel, kernel, kernel], bound),
        );
        let bias = store.add(format!("{name}.bias"), ParamKind::Bias, uniform(rng, &[cout], bound));
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        ctx.tape.conv3d(x, w, b)
    }
}

/// Batch normalization over axis 1 with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let c = [channels];
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Norm, Tensor::full(&c, T::one())),
            beta: store.add(format!("{name}.beta"), ParamKind::Norm, Tensor::zeros(&c)),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&c)),
            running_var: store.add(format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(&c, T::one())),
            channels,
        }
    }

    /// Training mode normalizes with batch statistics and blends them into
    /// the running averages: `running' = (1 - m) * running + m * batch`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        let eps = T::lit(BN_EPS);
        if ctx.training() {
            let (out, stats) = ctx.tape.batch_norm(x, g, b, None, eps)?;
            let stats = stats.expect("training mode returns batch stats");
            let m = T::lit(ctx.mode().bn_momentum);
            let blend = |old: &Tensor<T>, new: &[T]| {
                let data = old.data().iter().zip(new).map(|(&o, &n)| (T::one() - m) * o + m * n).collect();
                Tensor::new(old.shape().to_vec(), data).expect("same shape")
            };
            let rm = blend(ctx.buffer(self.running_mean), &stats.mean);
            let rv = blend(ctx.buffer(self.running_var), &stats.var);
            ctx.set_buffer(self.running_mean, rm);
            ctx.set_buffer(self.running_var, rv);
            Ok(out)
        } else {
            let rm = ctx.buffer(self.running_mean).data().to_vec();
            let rv = ctx.buffer(self.running_var).data().to_vec();
            let (out, _) = ctx.tape.batch_norm(x, g, b, Some((&rm, &rv)), eps)?;
            Ok(out)
        }
    }
}

/// `relu(bn(linear(x)))` over rows, with optional norm and activation.
#[derive(Clone, Debug)]
pub struct Dense {
    pub linear: Linear,
    pub norm: Option<BatchNorm>,
    pub relu: bool,
}

impl Dense {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        norm: bool,
        relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let linear = Linear::new(store, name, cin, cout, rng);
        let norm = norm.then(|| BatchNorm::new(store, &format!("{name}.bn"), cout));
        Self { linear, norm, relu }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.linear.forward(ctx, x)?;
        if let Some(bn) = &self.norm {
            h = bn.forward(ctx, h)?;
        }
        if self.relu {
            h = ctx.tape.relu(h)?;
        }
        Ok(h)
    }
}
