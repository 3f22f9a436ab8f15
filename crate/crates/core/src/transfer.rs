//! Trilinear transfer between particles and a node-centered grid.
//!
//! The grid covers the cube `[-a, a]^3` with `N` nodes per axis, so the
//! domain corners are nodes and the spacing is `h = 2a / (N - 1)`. Grid
//! tensors are laid out `[B, C, N, N, N]` with the x index slowest.
//! Particle tensors are rows `[B * P, C]`, sample `b` owning rows
//! `b * P .. (b + 1) * P`.
//!
//! Out-of-domain positions are clamped for the stencil only; the clamped
//! axis then has zero derivative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Real, Tape, Tensor, Var};

/// Guard for empty-node normalization in [`p2g`].
pub const EMPTY_NODE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    resolution: usize,
    half_extent: f64,
}

impl GridSpec {
    pub fn new(resolution: usize, half_extent: f64) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::Config(format!("grid resolution must be >= 2, got {resolution}")));
        }
        if !(half_extent > 0.0 && half_extent.is_finite()) {
            return Err(Error::Config(format!("grid half extent must be positive, got {half_extent}")));
        }
        Ok(Self {
            resolution,
            half_extent,
        })
    }

    /// `N^3` grid over `[-1, 1]^3`.
    pub fn unit(resolution: usize) -> Result<Self> {
        Self::new(resolution, 1.0)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn half_extent(&self) -> f64 {
        self.half_extent
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_extent / (self.resolution - 1) as f64
    }

    pub fn node_count(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution + j) * self.resolution + k
    }

    /// World position of node `(i, j, k)`.
    pub fn node_position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let h = self.spacing();
        let a = self.half_extent;
        [-a + i as f64 * h, -a + j as f64 * h, -a + k as f64 * h]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p.iter().all(|c| c.abs() <= self.half_extent)
    }
}

/// How particle rows split into samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParticleLayout {
    pub batch: usize,
    pub particles: usize,
}

impl ParticleLayout {
    pub fn single(particles: usize) -> Self {
        Self { batch: 1, particles }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.particles
    }

    pub fn sample_of(&self, row: usize) -> usize {
        row / self.particles
    }
}

/// Trilinear stencils of a set of particles: for each particle the eight
/// corner nodes of its cell, their weights, and the weight derivatives
/// with respect to the particle position.
#[derive(Clone, Debug)]
pub struct StencilWeights<T> {
    pub nodes: Vec<[usize; 8]>,
    pub weights: Vec<[T; 8]>,
    pub grads: Vec<[[T; 3]; 8]>,
}

impl<T: Real> StencilWeights<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Computes stencils for `positions` given as `[P, 3]` rows.
pub fn stencil<T: Real>(positions: &Tensor<T>, spec: &GridSpec) -> Result<StencilWeights<T>> {
    if positions.rank() != 2 || positions.shape()[1] != 3 {
        return Err(Error::dim(format!("positions must be [P, 3], got {:?}", positions.shape())));
    }
    let n = spec.resolution;
    let a = spec.half_extent;
    let inv_h = 1.0 / spec.spacing();
    let count = positions.shape()[0];
    let mut out = StencilWeights {
        nodes: Vec::with_capacity(count),
        weights: Vec::with_capacity(count),
        grads: Vec::with_capacity(count),
    };
    for (p, row) in positions.data().chunks_exact(3).enumerate() {
        let mut base = [0usize; 3];
        let mut w = [[T::zero(); 2]; 3];
        let mut dw = [[T::zero(); 2]; 3];
        for axis in 0..3 {
            let x = row[axis].as_f64();
            if x.is_nan() {
                return Err(Error::Input(format!("particle {p} has a NaN coordinate")));
            }
            let inside = x.abs() <= a;
            let u = (x.clamp(-a, a) + a) * inv_h;
            let i0 = (u.floor() as usize).min(n - 2);
            let t = u - i0 as f64;
            base[axis] = i0;
            w[axis] = [T::lit(1.0 - t), T::lit(t)];
            if inside {
                dw[axis] = [T::lit(-inv_h), T::lit(inv_h)];
            }
        }
        let mut nodes = [0usize; 8];
        let mut weights = [T::zero(); 8];
        let mut grads = [[T::zero(); 3]; 8];
        for c in 0..8 {
            let (bx, by, bz) = (c >> 2, (c >> 1) & 1, c & 1);
            nodes[c] = spec.node_index(base[0] + bx, base[1] + by, base[2] + bz);
            let (wx, wy, wz) = (w[0][bx], w[1][by], w[2][bz]);
            weights[c] = wx * wy * wz;
            grads[c] = [dw[0][bx] * wy * wz, wx * dw[1][by] * wz, wx * wy * dw[2][bz]];
        }
        out.nodes.push(nodes);
        out.weights.push(weights);
        out.grads.push(grads);
    }
    Ok(out)
}

fn check_rows<T: Real>(t: &Tensor<T>, rows: usize, what: &str) -> Result<usize> {
    if t.rank() != 2 || t.shape()[0] != rows {
        return Err(Error::dim(format!("{what}: expected [{rows}, C], got {:?}", t.shape())));
    }
    Ok(t.shape()[1])
}

fn check_layout<T: Real>(positions: &Tensor<T>, layout: ParticleLayout) -> Result<()> {
    if positions.shape() != [layout.rows(), 3] {
        return Err(Error::dim(format!(
            "positions {:?} do not match {} samples x {} particles",
            positions.shape(),
            layout.batch,
            layout.particles
        )));
    }
    Ok(())
}

/// Unnormalized scatter `G_i = sum_p w_ip q_p`.
struct P2gRaw<T> {
    q: Var,
    x: Var,
    stencil: StencilWeights<T>,
    layout: ParticleLayout,
    channels: usize,
    nodes: usize,
}

impl<T: Real> CustomOp<T> for P2gRaw<T> {
    fn name(&self) -> &'static str {
        "p2g_raw"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.q, self.x]
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (c, nn) = (self.channels, self.nodes);
        let q = inputs[0].data();
        let mut dq = needs[0].then(|| vec![T::zero(); q.len()]);
        let mut dx = needs[1].then(|| vec![T::zero(); self.layout.rows() * 3]);
        for p in 0..self.layout.rows() {
            let gb = self.layout.sample_of(p) * c * nn;
            for k in 0..8 {
                let node = self.stencil.nodes[p][k];
                let w = self.stencil.weights[p][k];
                let mut gq = T::zero();
                for ch in 0..c {
                    let gv = g[gb + ch * nn + node];
                    if let Some(dq) = dq.as_mut() {
                        dq[p * c + ch] += w * gv;
                    }
                    gq += gv * q[p * c + ch];
                }
                if let Some(dx) = dx.as_mut() {
                    for a in 0..3 {
                        dx[p * 3 + a] += self.stencil.grads[p][k][a] * gq;
                    }
                }
            }
        }
        vec![dq, dx]
    }
}

/// Mass-weighted normalized scatter `G_i = sum w m f / max(sum w m, eps)`.
struct P2gNormalized<T> {
    f: Var,
    x: Var,
    stencil: StencilWeights<T>,
    masses: Vec<T>,
    denom: Vec<T>,
    layout: ParticleLayout,
    channels: usize,
    nodes: usize,
}

impl<T: Real> CustomOp<T> for P2gNormalized<T> {
    fn name(&self) -> &'static str {
        "p2g"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.f, self.x]
    }

    fn backward(&self, inputs: &[&Tensor<T>], out: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (c, nn) = (self.channels, self.nodes);
        let eps = T::lit(EMPTY_NODE_EPS);
        let f = inputs[0].data();
        let out = out.data();
        let mut df = needs[0].then(|| vec![T::zero(); f.len()]);
        let mut dx = needs[1].then(|| vec![T::zero(); self.layout.rows() * 3]);
        for p in 0..self.layout.rows() {
            let b = self.layout.sample_of(p);
            let gb = b * c * nn;
            let m = self.masses[p];
            for k in 0..8 {
                let node = self.stencil.nodes[p][k];
                let d = self.denom[b * nn + node];
                if d < eps {
                    // empty node: constant zero output
                    continue;
                }
                let w = self.stencil.weights[p][k];
                let scale = m / d;
                let mut dw = T::zero();
                for ch in 0..c {
                    let idx = gb + ch * nn + node;
                    let gv = g[idx];
                    if let Some(df) = df.as_mut() {
                        df[p * c + ch] += w * scale * gv;
                    }
                    dw += gv * (f[p * c + ch] - out[idx]);
                }
                if let Some(dx) = dx.as_mut() {
                    let dw = dw * scale;
                    for a in 0..3 {
                        dx[p * 3 + a] += self.stencil.grads[p][k][a] * dw;
                    }
                }
            }
        }
        vec![df, dx]
    }
}

/// Gather `f_p = sum_i w_ip G_i`.
struct G2p<T> {
    field: Var,
    x: Var,
    stencil: StencilWeights<T>,
    layout: ParticleLayout,
    channels: usize,
    nodes: usize,
}

impl<T: Real> CustomOp<T> for G2p<T> {
    fn name(&self) -> &'static str {
        "g2p"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.field, self.x]
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (c, nn) = (self.channels, self.nodes);
        let field = inputs[0].data();
        let mut dfield = needs[0].then(|| vec![T::zero(); field.len()]);
        let mut dx = needs[1].then(|| vec![T::zero(); self.layout.rows() * 3]);
        for p in 0..self.layout.rows() {
            let gb = self.layout.sample_of(p) * c * nn;
            let gp = &g[p * c..(p + 1) * c];
            for k in 0..8 {
                let node = self.stencil.nodes[p][k];
                let w = self.stencil.weights[p][k];
                let mut dot = T::zero();
                for (ch, &gv) in gp.iter().enumerate() {
                    let idx = gb + ch * nn + node;
                    if let Some(dfield) = dfield.as_mut() {
                        dfield[idx] += w * gv;
                    }
                    dot += gv * field[idx];
                }
                if let Some(dx) = dx.as_mut() {
                    for a in 0..3 {
                        dx[p * 3 + a] += self.stencil.grads[p][k][a] * dot;
                    }
                }
            }
        }
        vec![dfield, dx]
    }
}

fn grid_shape(layout: ParticleLayout, channels: usize, spec: &GridSpec) -> Vec<usize> {
    let n = spec.resolution();
    vec![layout.batch, channels, n, n, n]
}

/// Records the unnormalized scatter of `quantity: [B*P, C]`.
pub fn p2g_raw_var<T: Real>(
    tape: &mut Tape<T>,
    quantity: Var,
    positions: Var,
    layout: ParticleLayout,
    spec: &GridSpec,
) -> Result<Var> {
    check_layout(tape.value(positions), layout)?;
    let c = check_rows(tape.value(quantity), layout.rows(), "p2g_raw quantity")?;
    let st = stencil(tape.value(positions), spec)?;
    let nn = spec.node_count();
    let q = tape.value(quantity).data();
    let mut out = vec![T::zero(); layout.batch * c * nn];
    for p in 0..layout.rows() {
        let gb = layout.sample_of(p) * c * nn;
        for k in 0..8 {
            let (node, w) = (st.nodes[p][k], st.weights[p][k]);
            for ch in 0..c {
                out[gb + ch * nn + node] += w * q[p * c + ch];
            }
        }
    }
    let value = Tensor::new(grid_shape(layout, c, spec), out)?;
    tape.custom(
        value,
        Box::new(P2gRaw {
            q: quantity,
            x: positions,
            stencil: st,
            layout,
            channels: c,
            nodes: nn,
        }),
    )
}

/// Records the mass-weighted normalized scatter of `features: [B*P, C]`.
pub fn p2g_var<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    positions: Var,
    masses: &[T],
    layout: ParticleLayout,
    spec: &GridSpec,
) -> Result<Var> {
    check_layout(tape.value(positions), layout)?;
    let c = check_rows(tape.value(features), layout.rows(), "p2g features")?;
    if masses.len() != layout.rows() {
        return Err(Error::dim(format!("{} masses for {} particles", masses.len(), layout.rows())));
    }
    if let Some(m) = masses.iter().find(|m| !(**m > T::zero())) {
        return Err(Error::Input(format!("particle masses must be positive, found {m}")));
    }
    let st = stencil(tape.value(positions), spec)?;
    let nn = spec.node_count();
    let f = tape.value(features).data();
    let mut num = vec![T::zero(); layout.batch * c * nn];
    let mut denom = vec![T::zero(); layout.batch * nn];
    for p in 0..layout.rows() {
        let b = layout.sample_of(p);
        let gb = b * c * nn;
        for k in 0..8 {
            let (node, w) = (st.nodes[p][k], st.weights[p][k] * masses[p]);
            denom[b * nn + node] += w;
            for ch in 0..c {
                num[gb + ch * nn + node] += w * f[p * c + ch];
            }
        }
    }
    let eps = T::lit(EMPTY_NODE_EPS);
    for b in 0..layout.batch {
        for ch in 0..c {
            for node in 0..nn {
                let d = denom[b * nn + node];
                num[(b * c + ch) * nn + node] /= d.max(eps);
            }
        }
    }
    let value = Tensor::new(grid_shape(layout, c, spec), num)?;
    tape.custom(
        value,
        Box::new(P2gNormalized {
            f: features,
            x: positions,
            stencil: st,
            masses: masses.to_vec(),
            denom,
            layout,
            channels: c,
            nodes: nn,
        }),
    )
}

/// Records the gather of `field: [B, C, N, N, N]` at `positions`.
pub fn g2p_var<T: Real>(
    tape: &mut Tape<T>,
    field: Var,
    positions: Var,
    layout: ParticleLayout,
    spec: &GridSpec,
) -> Result<Var> {
    check_layout(tape.value(positions), layout)?;
    let fs = tape.value(field).shape().to_vec();
    let n = spec.resolution();
    if fs.len() != 5 || fs[0] != layout.batch || fs[2..] != [n, n, n] {
        return Err(Error::dim(format!("g2p field {fs:?} does not match grid {n}^3 x {} samples", layout.batch)));
    }
    let c = fs[1];
    let nn = spec.node_count();
    let st = stencil(tape.value(positions), spec)?;
    let g = tape.value(field).data();
    let mut out = vec![T::zero(); layout.rows() * c];
    for p in 0..layout.rows() {
        let gb = layout.sample_of(p) * c * nn;
        for k in 0..8 {
            let (node, w) = (st.nodes[p][k], st.weights[p][k]);
            for ch in 0..c {
                out[p * c + ch] += w * g[gb + ch * nn + node];
            }
        }
    }
    let value = Tensor::new(vec![layout.rows(), c], out)?;
    tape.custom(
        value,
        Box::new(G2p {
            field,
            x: positions,
            stencil: st,
            layout,
            channels: c,
            nodes: nn,
        }),
    )
}

/// Node-centered channels over one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField<T> {
    pub spec: GridSpec,
    /// `[C, N, N, N]`.
    pub values: Tensor<T>,
}

impl<T: Real> GridField<T> {
    pub fn new(spec: GridSpec, values: Tensor<T>) -> Result<Self> {
        let n = spec.resolution();
        if values.rank() != 4 || values.shape()[1..] != [n, n, n] {
            return Err(Error::dim(format!("grid field {:?} for resolution {n}", values.shape())));
        }
        Ok(Self { spec, values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    /// Value of channel `c` at node `(i, j, k)`.
    pub fn at(&self, c: usize, i: usize, j: usize, k: usize) -> T {
        self.values.at(&[c, i, j, k])
    }

    fn from_batched(spec: GridSpec, t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        Self::new(spec, t.clone().reshape(&s[1..])?)
    }
}

/// Mass-weighted normalized particle-to-grid transfer of one cloud.
pub fn p2g<T: Real>(features: &Tensor<T>, positions: &Tensor<T>, masses: &Tensor<T>, spec: &GridSpec) -> Result<GridField<T>> {
    let layout = ParticleLayout::single(positions.shape().first().copied().unwrap_or(0));
    let mut tape = Tape::new();
    let (f, x) = (tape.constant(features.clone()), tape.constant(positions.clone()));
    let g = p2g_var(&mut tape, f, x, masses.data(), layout, spec)?;
    GridField::from_batched(*spec, tape.value(g))
}

/// Unnormalized particle-to-grid transfer of one cloud.
pub fn p2g_raw<T: Real>(quantity: &Tensor<T>, positions: &Tensor<T>, spec: &GridSpec) -> Result<GridField<T>> {
    let layout = ParticleLayout::single(positions.shape().first().copied().unwrap_or(0));
    let mut tape = Tape::new();
    let (q, x) = (tape.constant(quantity.clone()), tape.constant(positions.clone()));
    let g = p2g_raw_var(&mut tape, q, x, layout, spec)?;
    GridField::from_batched(*spec, tape.value(g))
}

/// Grid-to-particle transfer of one cloud; returns `[P, C]`.
pub fn g2p<T: Real>(field: &GridField<T>, positions: &Tensor<T>) -> Result<Tensor<T>> {
    let layout = ParticleLayout::single(positions.shape().first().copied().unwrap_or(0));
    let mut tape = Tape::new();
    let mut shape = vec![1];
    shape.extend_from_slice(field.values.shape());
    let g = tape.constant(field.values.clone().reshape(&shape)?);
    let x = tape.constant(positions.clone());
    let out = g2p_var(&mut tape, g, x, layout, &field.spec)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pos(rows: &[[f64; 3]]) -> Tensor<f64> {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::from_f64(&[rows.len(), 3], &flat).unwrap()
    }

    #[test]
    fn grid_spec_validation() {
        assert!(GridSpec::unit(1).is_err());
        assert!(GridSpec::new(4, 0.0).is_err());
        let g = GridSpec::unit(5).unwrap();
        assert_eq!(g.spacing(), 0.5);
        assert_eq!(g.node_position(4, 0, 2), [1.0, -1.0, 0.0]);
    }

    #[test]
    fn particle_on_node_has_unit_weight() {
        let spec = GridSpec::unit(5).unwrap();
        let st = stencil(&pos(&[[0.5, -0.5, 0.0]]), &spec).unwrap();
        let target = spec.node_index(3, 1, 2);
        for k in 0..8 {
            let expect = if st.nodes[0][k] == target { 1.0 } else { 0.0 };
            assert_eq!(st.weights[0][k], expect);
        }
    }

    #[test]
    fn cell_center_gives_uniform_weights() {
        let spec = GridSpec::unit(5).unwrap();
        let st = stencil(&pos(&[[0.25, 0.25, -0.75]]), &spec).unwrap();
        assert!(st.weights[0].iter().all(|&w| (w - 0.125).abs() < 1e-15));
    }

    #[test]
    fn edge_midpoint_splits_between_two_nodes() {
        let spec = GridSpec::unit(5).unwrap();
        let st = stencil(&pos(&[[0.25, 0.5, 0.0]]), &spec).unwrap();
        let mut w: Vec<f64> = st.weights[0].to_vec();
        w.sort_by(f64::total_cmp);
        assert_eq!(w, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn upper_domain_corner_belongs_to_last_cell() {
        let spec = GridSpec::unit(4).unwrap();
        let st = stencil(&pos(&[[1.0, 1.0, 1.0]]), &spec).unwrap();
        assert_eq!(st.nodes[0][7], spec.node_index(3, 3, 3));
        assert_eq!(st.weights[0][7], 1.0);
    }

    #[test]
    fn outside_positions_are_clamped_with_zero_derivative() {
        let spec = GridSpec::unit(4).unwrap();
        let st = stencil(&pos(&[[1.5, 0.1, 0.1]]), &spec).unwrap();
        let sum: f64 = st.weights[0].iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(st.grads[0].iter().all(|g| g[0] == 0.0));
    }

    #[test]
    fn nan_position_is_an_input_error() {
        let spec = GridSpec::unit(4).unwrap();
        let r = stencil(&pos(&[[f64::NAN, 0.0, 0.0]]), &spec);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn p2g_single_particle_examples() {
        let spec = GridSpec::unit(5).unwrap();
        let one = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let at_node = p2g(&Tensor::from_f64(&[1, 1], &[5.0]).unwrap(), &pos(&[[0.0, 0.0, 0.0]]), &one, &spec).unwrap();
        assert_eq!(at_node.at(0, 2, 2, 2), 5.0);
        assert_eq!(at_node.values.sum(), 5.0);

        let f = Tensor::from_f64(&[1, 2], &[1.5, -2.0]).unwrap();
        let centered = p2g(&f, &pos(&[[0.25, 0.25, 0.25]]), &one, &spec).unwrap();
        for (i, j, k) in [(2, 2, 2), (3, 3, 3), (2, 3, 2), (3, 2, 3)] {
            assert!((centered.at(0, i, j, k) - 1.5).abs() < 1e-12);
            assert!((centered.at(1, i, j, k) + 2.0).abs() < 1e-12);
        }
        assert_eq!(centered.at(0, 0, 0, 0), 0.0);
    }

    #[test]
    fn g2p_midpoint_interpolates() {
        let spec = GridSpec::unit(3).unwrap();
        let mut v = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        v.data_mut()[spec.node_index(2, 1, 1)] = 1.0;
        let field = GridField::new(spec, v).unwrap();
        let out = g2p(&field, &pos(&[[0.5, 0.0, 0.0]])).unwrap();
        assert!((out.item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_mass_rejected() {
        let spec = GridSpec::unit(3).unwrap();
        let r = p2g(
            &Tensor::from_f64(&[1, 1], &[1.0]).unwrap(),
            &pos(&[[0.0, 0.0, 0.0]]),
            &Tensor::from_f64(&[1], &[0.0]).unwrap(),
            &spec,
        );
        assert!(matches!(r, Err(Error::Input(_))));
    }
}
