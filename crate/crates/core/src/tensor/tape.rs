use super::kernels::{self, ConvGeom, MatLayout};
use super::{axis_dims, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this module.
///
/// `backward` receives the input values (in the order of `inputs()`), the
/// forward output, and the upstream gradient; it returns one optional
/// gradient buffer per input. Inputs whose `needs` flag is false may be
/// answered with `None`.
pub trait CustomOp<T: Real>: Send {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> Vec<Var>;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

/// Per-channel statistics of a training-mode batch norm.
///
/// `var` is the unbiased estimate, used for running-statistics updates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T: Real> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        cin: usize,
        cout: usize,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        invstd: Vec<T>,
        training: bool,
        dims: (usize, usize, usize),
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    ReduceMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ReduceSum {
        x: Var,
        dims: (usize, usize, usize),
        mean: bool,
    },
    SumAll {
        x: Var,
        mean: bool,
    },
    LogSoftmax {
        x: Var,
        cols: usize,
    },
    RowNorm {
        x: Var,
        cols: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
        row: usize,
    },
    SegmentMean {
        x: Var,
        segment: Vec<usize>,
        counts: Vec<usize>,
        row: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Custom(Box<dyn CustomOp<T>>),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Conv3d { .. } => "conv3d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::ReduceMax { .. } => "reduce_max",
            Op::ReduceSum { mean: false, .. } => "reduce_sum",
            Op::ReduceSum { mean: true, .. } => "reduce_mean",
            Op::SumAll { .. } => "sum",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::RowNorm { .. } => "row_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::SegmentMean { .. } => "segment_mean",
            Op::Dropout { .. } => "dropout",
            Op::Custom(c) => c.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Linear { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Conv3d { x, w, b, .. } => vec![*x, *w, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Relu(x) | Op::Scale(x, _) | Op::AddScalar(x) | Op::Reshape(x) => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::ReduceMax { x, .. }
            | Op::ReduceSum { x, .. }
            | Op::SumAll { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::RowNorm { x, .. }
            | Op::GatherRows { x, .. }
            | Op::SegmentMean { x, .. }
            | Op::Dropout { x, .. } => vec![*x],
            Op::Custom(c) => c.inputs(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Ordered record of executed operations.
///
/// Every op's inputs are recorded before it, so the node order is already a
/// topological order. Leaves created with `requires_grad` accumulate their
/// gradient across calls to [`Tape::backward`] until [`Tape::zero_grad`].
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an externally defined operation whose forward value has
    /// already been computed.
    pub fn custom(&mut self, value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        self.push(value, Op::Custom(op))
    }

    /// `y = x Wᵀ + b` for `x: [rows, cin]`, `W: [cout, cin]`, `b: [cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim(format!("linear: input {xs:?} vs weight {ws:?}")));
        }
        let (rows, cin, cout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim(format!("linear: bias {:?}, expected [{cout}]", self.shape(b))));
            }
        }
        let y = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            rows,
            cin,
            cout,
        );
        let value = Tensor::new(vec![rows, cout], y)?;
        self.push(value, Op::Linear { x, w, b, rows, cin, cout })
    }

    /// Stride-1, zero-padded 3D cross-correlation.
    ///
    /// `x: [B, Cin, D, H, W]`, `w: [Cout, Cin, k, k, k]` with odd `k`,
    /// `b: [Cout]`; the output keeps the spatial size.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 5 || ws.len() != 5 {
            return Err(Error::dim(format!("conv3d: input {xs:?}, kernel {ws:?}")));
        }
        let k = ws[2];
        if ws[3] != k || ws[4] != k || k % 2 == 0 || ws[1] != xs[1] {
            return Err(Error::dim(format!("conv3d: kernel {ws:?} incompatible with input {xs:?}")));
        }
        if self.shape(b) != [ws[0]] {
            return Err(Error::dim(format!("conv3d: bias {:?}", self.shape(b))));
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            dims: [xs[2], xs[3], xs[4]],
            kernel: k,
        };
        let out = kernels::conv3d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let value = Tensor::new(vec![xs[0], ws[0], xs[2], xs[3], xs[4]], out)?;
        self.push(value, Op::Conv3d { x, w, b, geom })
    }

    /// Per-channel batch normalization over axis 1 of `x: [N, C, ...]`.
    ///
    /// With `running = None` the batch statistics are used (training mode)
    /// and returned for the caller's running-average update. With
    /// `running = Some((mean, var))` those statistics are used instead.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim(format!("batch_norm: input {xs:?} has no channel axis")));
        }
        let (outer, c, inner) = axis_dims(&xs, 1)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!("batch_norm: affine params must be [{c}]")));
        }
        let count = outer * inner;
        let xv = self.value(x).data();
        let (mean, var, stats) = match running {
            None => {
                if count < 2 {
                    return Err(Error::Statistics(format!(
                        "batch_norm needs at least 2 values per channel in training mode, got {count}"
                    )));
                }
                let mut mean = vec![0.0f64; c];
                let mut sq = vec![0.0f64; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        let mut s = 0.0;
                        for &v in &xv[base..base + inner] {
                            s += v.as_f64();
                        }
                        mean[ch] += s;
                    }
                }
                for m in &mut mean {
                    *m /= count as f64;
                }
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        let mu = mean[ch];
                        let mut s = 0.0;
                        for &v in &xv[base..base + inner] {
                            let d = v.as_f64() - mu;
                            s += d * d;
                        }
                        sq[ch] += s;
                    }
                }
                let biased: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
                let unbiased: Vec<T> = sq.iter().map(|s| T::lit(s / (count - 1) as f64)).collect();
                let stats = BatchStats {
                    mean: mean.iter().map(|&m| T::lit(m)).collect(),
                    var: unbiased,
                };
                (mean, biased, Some(stats))
            }
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::dim("batch_norm: running stats length"));
                }
                (
                    rm.iter().map(|v| v.as_f64()).collect(),
                    rv.iter().map(|v| v.as_f64()).collect(),
                    None,
                )
            }
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::lit(1.0 / (v + eps.as_f64()).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xv[i] - mean_t[ch]) * invstd[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let var_out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                training: running.is_none(),
                dims: (outer, c, inner),
            },
        )?;
        Ok((var_out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, op.name())?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, op)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = axis_dims(&base, axis)?;
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::dim(format!("concat: shape {s:?} vs {base:?} on axis {axis}")));
            }
            widths.push(s[axis]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                let d = self.value(v).data();
                data.extend_from_slice(&d[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
                outer,
                inner,
            },
        )
    }

    /// Maximum along `axis`. The gradient goes to the first maximal entry.
    pub fn reduce_max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (outer, n, inner) = axis_dims(&xs, axis)?;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for j in 1..n {
                    let idx = (o * n + j) * inner + i;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(reduced_shape(&xs, axis), out)?;
        self.push(value, Op::ReduceMax { x, argmax })
    }

    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_add(x, axis, false)
    }

    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_add(x, axis, true)
    }

    fn reduce_add(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (outer, n, inner) = axis_dims(&xs, axis)?;
        let d = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            let inv = T::one() / T::lit(n as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(reduced_shape(&xs, axis), out)?;
        self.push(
            value,
            Op::ReduceSum {
                x,
                dims: (outer, n, inner),
                mean,
            },
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll { x, mean: false })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / T::lit(v.numel() as f64));
        self.push(value, Op::SumAll { x, mean: true })
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let cols = *xs.last().ok_or_else(|| Error::dim("log_softmax of a scalar"))?;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(d.len());
        for row in d.chunks_exact(cols) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::new(xs, out)?;
        self.push(value, Op::LogSoftmax { x, cols })
    }

    /// Euclidean norm over the last axis.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim(format!("row_norm needs rank >= 2, got {xs:?}")));
        }
        let cols = xs[xs.len() - 1];
        let out = self
            .value(x)
            .data()
            .chunks_exact(cols)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let value = Tensor::new(xs[..xs.len() - 1].to_vec(), out)?;
        self.push(value, Op::RowNorm { x, cols })
    }

    /// Selects rows (entries of axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() {
            return Err(Error::dim("gather_rows of a scalar"));
        }
        let row: usize = xs[1..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            if i >= xs[0] {
                return Err(Error::dim(format!("gather_rows: index {i} out of range {}", xs[0])));
            }
            out.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut shape = xs;
        shape[0] = index.len();
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
                row,
            },
        )
    }

    /// Mean of the rows sharing a segment id; empty segments give zero rows.
    pub fn segment_mean(&mut self, x: Var, segment: &[usize], segments: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || xs[0] != segment.len() {
            return Err(Error::dim(format!("segment_mean: {} ids for shape {xs:?}", segment.len())));
        }
        let row: usize = xs[1..].iter().product();
        let d = self.value(x).data();
        let mut counts = vec![0usize; segments];
        let mut out = vec![T::zero(); segments * row];
        for (r, &s) in segment.iter().enumerate() {
            if s >= segments {
                return Err(Error::dim(format!("segment id {s} out of range {segments}")));
            }
            counts[s] += 1;
            for (acc, &v) in out[s * row..(s + 1) * row].iter_mut().zip(&d[r * row..(r + 1) * row]) {
                *acc += v;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = T::one() / T::lit(c as f64);
                out[s * row..(s + 1) * row].iter_mut().for_each(|v| *v *= inv);
            }
        }
        let mut shape = xs;
        shape[0] = segments;
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::SegmentMean {
                x,
                segment: segment.to_vec(),
                counts,
                row,
            },
        )
    }

    /// Multiplies by a fixed mask (already scaled by the keep probability).
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(Error::dim("dropout mask length"));
        }
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.push(value, Op::Dropout { x, mask })
    }

    /// Reverse pass from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            let contributions = self.op_backward(i, &g);
            for (v, cg) in contributions {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], cg);
                }
            }
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g) {
                        *a += v;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn op_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b, rows, cin, cout } => {
                let (rows, cin, cout) = (*rows, *cin, *cout);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * cin];
                    kernels::gemm(
                        T::one(),
                        g,
                        MatLayout::dense(rows, cout),
                        self.value(*w).data(),
                        MatLayout::dense(cout, cin),
                        T::zero(),
                        &mut dx,
                    );
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); cout * cin];
                    kernels::gemm(
                        T::one(),
                        g,
                        MatLayout::transposed(cout, rows),
                        self.value(*x).data(),
                        MatLayout::dense(rows, cin),
                        T::zero(),
                        &mut dw,
                    );
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); cout];
                        for row in g.chunks_exact(cout) {
                            for (a, &v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        out.push((*b, db));
                    }
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv3d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    out.push((*w, dw));
                }
                out.push((*b, db));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                training,
                dims,
            } => {
                let (outer, c, inner) = *dims;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_dxhat = vec![T::zero(); c];
                let mut sum_dxhat_xhat = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for k in base..base + inner {
                            dgamma[ch] += g[k] * xhat[k];
                            dbeta[ch] += g[k];
                            let dh = g[k] * gm[ch];
                            sum_dxhat[ch] += dh;
                            sum_dxhat_xhat[ch] += dh * xhat[k];
                        }
                    }
                }
                if self.needs(*x) {
                    let m = T::lit((outer * inner) as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for k in base..base + inner {
                                let dh = g[k] * gm[ch];
                                dx[k] = if *training {
                                    invstd[ch] / m * (m * dh - sum_dxhat[ch] - xhat[k] * sum_dxhat_xhat[ch])
                                } else {
                                    dh * invstd[ch]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().zip(va).map(|(&x, &y)| x * y).collect()));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|&v| v * *c).collect())),
            Op::AddScalar(x) | Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Concat {
                inputs,
                widths,
                outer,
                inner,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if self.needs(v) {
                        let mut dv = Vec::with_capacity(outer * w * inner);
                        for o in 0..*outer {
                            let start = (o * total + offset) * inner;
                            dv.extend_from_slice(&g[start..start + w * inner]);
                        }
                        out.push((v, dv));
                    }
                    offset += w;
                }
            }
            Op::ReduceMax { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
                out.push((*x, dx));
            }
            Op::ReduceSum { x, dims, mean } => {
                let (outer, n, inner) = *dims;
                let scale = if *mean { T::one() / T::lit(n as f64) } else { T::one() };
                let mut dx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        dx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * scale));
                    }
                }
                out.push((*x, dx));
            }
            Op::SumAll { x, mean } => {
                let n = self.value(*x).numel();
                let gv = if *mean { g[0] / T::lit(n as f64) } else { g[0] };
                out.push((*x, vec![gv; n]));
            }
            Op::LogSoftmax { x, cols } => {
                let y = node.value.data();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(*cols).zip(g.chunks_exact(*cols)) {
                    let s: T = gr.iter().copied().sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| gv - yv.exp() * s));
                }
                out.push((*x, dx));
            }
            Op::RowNorm { x, cols } => {
                let xv = self.value(*x).data();
                let norms = node.value.data();
                let mut dx = Vec::with_capacity(xv.len());
                for ((r, &n), &gv) in xv.chunks_exact(*cols).zip(norms).zip(g) {
                    if n > T::zero() {
                        dx.extend(r.iter().map(|&v| gv * v / n));
                    } else {
                        dx.extend(std::iter::repeat_n(T::zero(), *cols));
                    }
                }
                out.push((*x, dx));
            }
            Op::GatherRows { x, index, row } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (k, &i) in index.iter().enumerate() {
                    for (a, &v) in dx[i * row..(i + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]) {
                        *a += v;
                    }
                }
                out.push((*x, dx));
            }
            Op::SegmentMean {
                x,
                segment,
                counts,
                row,
            } => {
                let mut dx = Vec::with_capacity(segment.len() * row);
                for &s in segment {
                    let inv = T::one() / T::lit(counts[s] as f64);
                    dx.extend(g[s * row..(s + 1) * row].iter().map(|&v| v * inv));
                }
                out.push((*x, dx));
            }
            Op::Dropout { x, mask } => {
                out.push((*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect()));
            }
            Op::Custom(op) => {
                let inputs = op.inputs();
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                for (v, dv) in inputs.iter().zip(op.backward(&values, &node.value, g, &needs)) {
                    if let Some(dv) = dv {
                        out.push((*v, dv));
                    }
                }
            }
        }
        out
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}
