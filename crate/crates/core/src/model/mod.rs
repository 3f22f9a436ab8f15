//! The full network: descriptor embedding, advection steps and task heads.

mod penalty;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use penalty::{
    boundary_penalty, diffusion_penalty, gather_penalty, loss, smoothed_cross_entropy, LossParts, Targets,
};

use crate::advect::{advect_step, AdvectionParams, ParticleSystem, StepParams, TrajectorySink};
use crate::error::{Error, Result};
use crate::featinit::{multiscale_descriptor, DESCRIPTOR_WIDTH};
use crate::tensor::nn::{Ctx, Dense, ForwardMode, Linear};
use crate::tensor::{ParamStore, Real, Tensor, Var};
use crate::transfer::{GridSpec, ParticleLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Segmentation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    /// Object classes, or part labels for segmentation.
    pub num_classes: usize,
    pub grid: usize,
    pub half_extent: f64,
    pub advection: AdvectionParams,
    pub init_widths: [usize; 2],
    /// Width of the per-point layer feeding the global max-pool.
    pub global_width: usize,
    pub head_widths: Vec<usize>,
    pub dropout: f64,
    /// Probability assigned to the true class by label smoothing.
    pub label_confidence: f64,
    pub lambda_boundary: f64,
    pub lambda_gather: f64,
    pub lambda_diffusion: f64,
}

impl ModelConfig {
    pub fn classification(num_classes: usize) -> Self {
        Self {
            task: Task::Classification,
            num_classes,
            grid: 16,
            half_extent: 1.0,
            advection: AdvectionParams::default(),
            init_widths: [64, 64],
            global_width: 1024,
            head_widths: vec![512, 256],
            dropout: 0.3,
            label_confidence: 0.8,
            lambda_boundary: 1.0,
            lambda_gather: 0.01,
            lambda_diffusion: 0.01,
        }
    }

    pub fn segmentation(num_parts: usize) -> Self {
        Self {
            task: Task::Segmentation,
            grid: 32,
            head_widths: vec![256, 128],
            ..Self::classification(num_parts)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.advection.validate()?;
        GridSpec::new(self.grid, self.half_extent)?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.init_widths.contains(&0) || self.global_width == 0 || self.head_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.label_confidence > 0.0 && self.label_confidence <= 1.0) {
            return Err(Error::Config(format!(
                "label confidence must lie in (0, 1], got {}",
                self.label_confidence
            )));
        }
        for (name, v) in [
            ("lambda_boundary", self.lambda_boundary),
            ("lambda_gather", self.lambda_gather),
            ("lambda_diffusion", self.lambda_diffusion),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid, self.half_extent)
    }

    /// Particle feature width after step `j` (`j = 0` is the embedding).
    pub fn feature_width(&self, j: usize) -> usize {
        self.init_widths[1] + j * self.advection.growth()
    }
}

/// Outputs of one forward pass. Per-point tensors are in the caller's point
/// order.
pub struct Forward {
    /// `[B, C]` for classification, `[B*P, C]` for segmentation.
    pub logits: Var,
    /// Final particle positions `[B*P, 3]`.
    pub positions: Var,
    pub layout: ParticleLayout,
}

pub struct Network<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    init: [Dense; 2],
    steps: Vec<StepParams>,
    lift: Dense,
    head: Vec<Dense>,
    out: Linear,
    spec: GridSpec,
}

impl<T: Real> Network<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = config.grid_spec()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let [w0, w1] = config.init_widths;
        let init = [
            Dense::new(&mut store, "init0", DESCRIPTOR_WIDTH, w0, true, true, &mut rng),
            Dense::new(&mut store, "init1", w0, w1, true, true, &mut rng),
        ];
        let steps = (0..config.advection.steps)
            .map(|j| StepParams::new(&mut store, &format!("step{j}"), config.feature_width(j), &config.advection, &mut rng))
            .collect();
        let final_width = config.feature_width(config.advection.steps);
        let lift = Dense::new(&mut store, "lift", final_width, config.global_width, true, true, &mut rng);
        let (mut cin, norm) = match config.task {
            Task::Classification => (config.global_width, false),
            Task::Segmentation => (final_width + config.global_width, true),
        };
        let mut head = Vec::new();
        for (i, &w) in config.head_widths.iter().enumerate() {
            head.push(Dense::new(&mut store, &format!("head{i}"), cin, w, norm, true, &mut rng));
            cin = w;
        }
        let out = Linear::new(&mut store, "out", cin, config.num_classes, &mut rng);
        Ok(Self {
            config,
            store,
            init,
            steps,
            lift,
            head,
            out,
            spec,
        })
    }

    /// Learnable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn grid_spec(&self) -> GridSpec {
        self.spec
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            store: self.store.cast(),
            init: self.init.clone(),
            steps: self.steps.clone(),
            lift: self.lift.clone(),
            head: self.head.clone(),
            out: self.out.clone(),
            spec: self.spec,
        }
    }

    /// Runs the network on `clouds: [B*P, 3]`.
    ///
    /// Points of each sample are processed in lexicographic order, so the
    /// result does not depend on the order they are given in.
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_, T>,
        clouds: &Tensor<T>,
        layout: ParticleLayout,
        mut sink: Option<&mut dyn TrajectorySink<T>>,
    ) -> Result<Forward> {
        if layout.particles == 0 || layout.batch == 0 {
            return Err(Error::Input("empty point cloud".into()));
        }
        if clouds.shape() != [layout.rows(), 3] {
            return Err(Error::dim(format!(
                "clouds {:?} do not match {} x {} points",
                clouds.shape(),
                layout.batch,
                layout.particles
            )));
        }
        if !clouds.is_finite() {
            return Err(Error::Input("point coordinates must be finite".into()));
        }
        let order = canonical_order(clouds, layout);
        let mut inverse = vec![0; order.len()];
        for (r, &o) in order.iter().enumerate() {
            inverse[o] = r;
        }
        let sorted = gather_rows(clouds, &order, 3);
        let mut descriptor = Vec::with_capacity(layout.rows() * DESCRIPTOR_WIDTH);
        for b in 0..layout.batch {
            let rows = layout.particles * 3;
            let cloud = Tensor::new(vec![layout.particles, 3], sorted.data()[b * rows..(b + 1) * rows].to_vec())?;
            descriptor.extend_from_slice(multiscale_descriptor(&cloud)?.data());
        }
        let descriptor = Tensor::new(vec![layout.rows(), DESCRIPTOR_WIDTH], descriptor)?;

        let d = ctx.tape.constant(descriptor);
        let h = self.init[0].forward(ctx, d)?;
        let features = self.init[1].forward(ctx, h)?;
        let positions = ctx.tape.constant(sorted);
        let mut sys = ParticleSystem::at_rest(&mut ctx.tape, positions, features, layout)?;
        let mut record = |ctx: &Ctx<'_, T>, step: usize, sys: &ParticleSystem<T>| {
            if let Some(s) = sink.as_deref_mut() {
                let x = gather_rows(ctx.tape.value(sys.positions), &inverse, 3);
                let v = gather_rows(ctx.tape.value(sys.velocities), &inverse, 3);
                s.record(step, &x, &v);
            }
        };
        record(ctx, 0, &sys);
        for (j, params) in self.steps.iter().enumerate() {
            sys = advect_step(ctx, &sys, params, &self.spec, &self.config.advection)?;
            record(ctx, j + 1, &sys);
        }

        let lifted = self.lift.forward(ctx, sys.features)?;
        let g = self.config.global_width;
        let grouped = ctx.tape.reshape(lifted, &[layout.batch, layout.particles, g])?;
        let global = ctx.tape.reduce_max(grouped, 1)?;
        let mut h = match self.config.task {
            Task::Classification => global,
            Task::Segmentation => {
                let owner: Vec<usize> = (0..layout.rows()).map(|r| layout.sample_of(r)).collect();
                let spread = ctx.tape.gather_rows(global, &owner)?;
                ctx.tape.concat(&[sys.features, spread], 1)?
            }
        };
        for layer in &self.head {
            h = layer.forward(ctx, h)?;
        }
        h = ctx.dropout(h, self.config.dropout)?;
        let mut logits = self.out.forward(ctx, h)?;
        if self.config.task == Task::Segmentation {
            logits = ctx.tape.gather_rows(logits, &inverse)?;
        }
        let positions = ctx.tape.gather_rows(sys.positions, &inverse)?;
        Ok(Forward {
            logits,
            positions,
            layout,
        })
    }

    /// Evaluation-mode logits for one cloud `[P, 3]`: `[C]` for
    /// classification, `[P, C]` for segmentation.
    pub fn predict(&self, cloud: &Tensor<T>) -> Result<Tensor<T>> {
        let p = cloud.shape().first().copied().unwrap_or(0);
        let mut ctx = Ctx::new(&self.store, ForwardMode::eval());
        let out = self.forward(&mut ctx, cloud, ParticleLayout::single(p), None)?;
        let logits = ctx.tape.value(out.logits).clone();
        match self.config.task {
            Task::Classification => logits.reshape(&[self.config.num_classes]),
            Task::Segmentation => Ok(logits),
        }
    }
}

/// Row permutation sorting the points of every sample lexicographically;
/// entry `r` is the source row of sorted row `r`.
fn canonical_order<T: Real>(clouds: &Tensor<T>, layout: ParticleLayout) -> Vec<usize> {
    let d = clouds.data();
    let key = |r: usize| [d[r * 3].as_f64(), d[r * 3 + 1].as_f64(), d[r * 3 + 2].as_f64()];
    let mut order = Vec::with_capacity(layout.rows());
    for b in 0..layout.batch {
        let mut rows: Vec<usize> = (b * layout.particles..(b + 1) * layout.particles).collect();
        rows.sort_by(|&i, &j| {
            let (a, c) = (key(i), key(j));
            a[0].total_cmp(&c[0])
                .then(a[1].total_cmp(&c[1]))
                .then(a[2].total_cmp(&c[2]))
        });
        order.extend(rows);
    }
    order
}

fn gather_rows<T: Real>(t: &Tensor<T>, index: &[usize], width: usize) -> Tensor<T> {
    let d = t.data();
    let data = index.iter().flat_map(|&i| d[i * width..(i + 1) * width].iter().copied()).collect();
    Tensor::new(vec![index.len(), width], data).expect("row gather keeps shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_classifier_lands_near_one_million_parameters() {
        let net = Network::<f32>::new(ModelConfig::classification(40), 0).unwrap();
        let n = net.param_count();
        assert!((800_000..=1_300_000).contains(&n), "{n}");
    }

    #[test]
    fn feature_widths() {
        let c = ModelConfig::classification(10);
        assert_eq!((0..3).map(|j| c.feature_width(j)).collect::<Vec<_>>(), vec![64, 128, 192]);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::classification(3);
        c.label_confidence = 0.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::segmentation(3);
        c.lambda_gather = -1.0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::segmentation(3).validate().is_ok());
    }

    #[test]
    fn canonical_order_sorts_within_samples() {
        let t = Tensor::from_f64(&[4, 3], &[1., 0., 0., 0., 5., 0., 3., 0., 0., -1., 0., 0.]).unwrap();
        let o = canonical_order::<f64>(&t, ParticleLayout { batch: 2, particles: 2 });
        assert_eq!(o, vec![1, 0, 3, 2]);
    }
}
