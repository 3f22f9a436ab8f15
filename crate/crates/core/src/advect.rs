//! One advection step: reduce particle features, scatter them to the grid,
//! turn them into a force field and a velocity field, blend PIC and FLIP
//! particle velocities, move the particles and grow their features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{BatchNorm, Conv3d, Ctx, Dense};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};
use crate::transfer::{g2p_var, p2g_var, GridSpec, ParticleLayout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvectionParams {
    /// PIC weight in the velocity blend; `1` is pure PIC, `0` pure FLIP.
    pub alpha: f64,
    pub total_time: f64,
    pub steps: usize,
    pub reduce_width: usize,
    pub conv_widths: [usize; 3],
    pub velocity_hidden: usize,
}

impl Default for AdvectionParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            total_time: 1.0,
            steps: 2,
            reduce_width: 32,
            conv_widths: [32, 16, 32],
            velocity_hidden: 16,
        }
    }
}

impl AdvectionParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.total_time > 0.0 && self.total_time.is_finite()) {
            return Err(Error::Config(format!("total time must be positive, got {}", self.total_time)));
        }
        if self.reduce_width == 0 || self.velocity_hidden == 0 || self.conv_widths.contains(&0) {
            return Err(Error::Config("advection layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Time step `T / steps`; zero when advection is disabled.
    pub fn dt(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.total_time / self.steps as f64
        }
    }

    /// Features appended per step: the reduced features plus the gathered
    /// force field.
    pub fn growth(&self) -> usize {
        self.reduce_width + self.conv_widths[2]
    }
}

/// Particles of a batch of clouds as tape variables.
#[derive(Clone, Debug)]
pub struct ParticleSystem<T> {
    /// `[B*P, 3]`.
    pub positions: Var,
    /// `[B*P, 3]`.
    pub velocities: Var,
    /// `[B*P, K]`.
    pub features: Var,
    /// `[B*P]`, constant through the evolution.
    pub masses: Tensor<T>,
    pub layout: ParticleLayout,
}

impl<T: Real> ParticleSystem<T> {
    /// Unit masses and zero initial velocities.
    pub fn at_rest(tape: &mut Tape<T>, positions: Var, features: Var, layout: ParticleLayout) -> Result<Self> {
        if tape.shape(positions) != [layout.rows(), 3] {
            return Err(Error::dim(format!("positions {:?} for {} particles", tape.shape(positions), layout.rows())));
        }
        if tape.shape(features).first() != Some(&layout.rows()) {
            return Err(Error::dim(format!("features {:?} for {} particles", tape.shape(features), layout.rows())));
        }
        let velocities = tape.constant(Tensor::zeros(&[layout.rows(), 3]));
        Ok(Self {
            positions,
            velocities,
            features,
            masses: Tensor::full(&[layout.rows()], T::one()),
            layout,
        })
    }

    pub fn feature_width(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.features)[1]
    }
}

/// Conv3d, batch norm and ReLU on the grid.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv3d,
    pub norm: BatchNorm,
}

impl ConvBlock {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(ctx, x)?;
        let h = self.norm.forward(ctx, h)?;
        ctx.tape.relu(h)
    }
}

/// Weights owned by one advection step.
#[derive(Clone, Debug)]
pub struct StepParams {
    pub reduce: Dense,
    pub convs: Vec<ConvBlock>,
    pub velocity: [Conv3d; 2],
    pub in_width: usize,
}

impl StepParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_width: usize,
        ap: &AdvectionParams,
        rng: &mut impl Rng,
    ) -> Self {
        let reduce = Dense::new(store, &format!("{name}.reduce"), in_width, ap.reduce_width, true, true, rng);
        let mut convs = Vec::with_capacity(3);
        let mut cin = ap.reduce_width;
        for (i, &cout) in ap.conv_widths.iter().enumerate() {
            let conv = Conv3d::new(store, &format!("{name}.force{i}"), cin, cout, 3, rng);
            let norm = BatchNorm::new(store, &format!("{name}.force{i}.bn"), cout);
            convs.push(ConvBlock { conv, norm });
            cin = cout;
        }
        let velocity = [
            Conv3d::new(store, &format!("{name}.velocity0"), cin, ap.velocity_hidden, 1, rng),
            Conv3d::new(store, &format!("{name}.velocity1"), ap.velocity_hidden, 3, 1, rng),
        ];
        Self {
            reduce,
            convs,
            velocity,
            in_width,
        }
    }
}

/// Three conv-BN-ReLU layers on the scattered features: `[B, C, N, N, N]`.
pub fn force_field<T: Real>(ctx: &mut Ctx<'_, T>, params: &StepParams, grid: Var) -> Result<Var> {
    let mut h = grid;
    for block in &params.convs {
        h = block.forward(ctx, h)?;
    }
    Ok(h)
}

/// Per-node two-layer network from the force field to a 3-channel velocity
/// field, with no output activation.
pub fn velocity_field<T: Real>(ctx: &mut Ctx<'_, T>, params: &StepParams, force: Var) -> Result<Var> {
    let h = params.velocity[0].forward(ctx, force)?;
    let h = ctx.tape.relu(h)?;
    params.velocity[1].forward(ctx, h)
}

/// `alpha * v_pic + (1 - alpha) * v_flip` with
/// `v_pic = g2p(V)` and `v_flip = v_old + g2p(V - p2g(v_old))`.
#[allow(clippy::too_many_arguments)]
pub fn pic_flip<T: Real>(
    tape: &mut Tape<T>,
    v_old: Var,
    v_grid: Var,
    positions: Var,
    masses: &[T],
    layout: ParticleLayout,
    spec: &GridSpec,
    alpha: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let v_pic = g2p_var(tape, v_grid, positions, layout, spec)?;
    let transferred = p2g_var(tape, v_old, positions, masses, layout, spec)?;
    let increment = tape.sub(v_grid, transferred)?;
    let dv = g2p_var(tape, increment, positions, layout, spec)?;
    let v_flip = tape.add(v_old, dv)?;
    blend(tape, v_pic, v_flip, alpha)
}

/// `alpha * a + (1 - alpha) * b`.
pub fn blend<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, alpha: f64) -> Result<Var> {
    let a = tape.scale(a, T::lit(alpha))?;
    let b = tape.scale(b, T::lit(1.0 - alpha))?;
    tape.add(a, b)
}

/// Explicit Euler: `x + dt * v`.
pub fn integrate<T: Real>(tape: &mut Tape<T>, positions: Var, velocities: Var, dt: f64) -> Result<Var> {
    let step = tape.scale(velocities, T::lit(dt))?;
    tape.add(positions, step)
}

/// Advances the particle system by one step.
pub fn advect_step<T: Real>(
    ctx: &mut Ctx<'_, T>,
    sys: &ParticleSystem<T>,
    params: &StepParams,
    spec: &GridSpec,
    ap: &AdvectionParams,
) -> Result<ParticleSystem<T>> {
    let width = sys.feature_width(&ctx.tape);
    if width != params.in_width {
        return Err(Error::dim(format!(
            "step expects {} feature channels, particles carry {width}",
            params.in_width
        )));
    }
    let layout = sys.layout;
    let reduced = params.reduce.forward(ctx, sys.features)?;
    let grid = p2g_var(&mut ctx.tape, reduced, sys.positions, sys.masses.data(), layout, spec)?;
    let force = force_field(ctx, params, grid)?;
    let gathered = g2p_var(&mut ctx.tape, force, sys.positions, layout, spec)?;
    let v_grid = velocity_field(ctx, params, force)?;
    let velocities = pic_flip(
        &mut ctx.tape,
        sys.velocities,
        v_grid,
        sys.positions,
        sys.masses.data(),
        layout,
        spec,
        ap.alpha,
    )?;
    let positions = integrate(&mut ctx.tape, sys.positions, velocities, ap.dt())?;
    let features = ctx.tape.concat(&[sys.features, reduced, gathered], 1)?;
    Ok(ParticleSystem {
        positions,
        velocities,
        features,
        masses: sys.masses.clone(),
        layout,
    })
}

/// Receives the particle state after every step; step 0 is the input.
pub trait TrajectorySink<T> {
    /// `positions` and `velocities` are `[B*P, 3]` in input point order.
    fn record(&mut self, step: usize, positions: &Tensor<T>, velocities: &Tensor<T>);
}

/// Keeps every recorded state in memory.
#[derive(Clone, Debug, Default)]
pub struct Trajectory<T> {
    pub frames: Vec<(usize, Tensor<T>, Tensor<T>)>,
}

impl<T: Clone> TrajectorySink<T> for Trajectory<T> {
    fn record(&mut self, step: usize, positions: &Tensor<T>, velocities: &Tensor<T>) {
        self.frames.push((step, positions.clone(), velocities.clone()));
    }
}
