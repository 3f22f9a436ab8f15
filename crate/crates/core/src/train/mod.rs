//! Optimization loop: AdamW, learning-rate and batch-norm schedules,
//! augmentation, evaluation metrics.

mod augment;
mod metrics;
mod optim;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentConfig};
pub use metrics::{accuracy, category_parts, restricted_argmax, shape_iou};
pub use optim::{adamw_step, clip_global_norm, AdamHyper, AdamState};

use crate::data::{derive_seed, to_f64, Batch, CloudSample, Dataset, LabelMode};
use crate::error::{Error, Result};
use crate::model::{loss, Network, Targets, Task};
use crate::tensor::nn::{commit_buffers, Ctx, ForwardMode};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate is multiplied by `lr_decay` every `lr_decay_every`
    /// epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Batch-norm momentum at the first and the final epoch, linear between.
    pub bn_momentum_start: f64,
    pub bn_momentum_end: f64,
    /// Global gradient norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub augment: AugmentConfig,
    /// Also score the (unaugmented) training set after every epoch.
    pub eval_train: bool,
    /// Stop once the train metric reaches this value (and the test target,
    /// if any).
    pub stop_train_metric: Option<f64>,
    pub stop_test_metric: Option<f64>,
    /// Checkpoint period in epochs; 0 saves only the best and final state.
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 200,
            lr_decay: 0.8,
            lr_decay_every: 20,
            bn_momentum_start: 0.5,
            bn_momentum_end: 0.01,
            grad_clip: Some(10.0),
            augment: AugmentConfig::default(),
            eval_train: true,
            stop_train_metric: None,
            stop_test_metric: None,
            checkpoint_every: 10,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("optimizer: {what}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.eps > 0.0) {
            return bad("weight_decay must be >= 0 and eps > 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.lr_decay_every == 0 {
            return bad("batch_size, epochs and lr_decay_every must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("lr_decay must lie in (0, 1)");
        }
        let unit = |m: f64| m > 0.0 && m <= 1.0;
        if !(unit(self.bn_momentum_start) && unit(self.bn_momentum_end)) {
            return bad("batch-norm momenta must lie in (0, 1]");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        self.augment.validate()
    }

    pub fn hyper(&self, epoch: usize) -> AdamHyper {
        AdamHyper {
            lr: self.lr_at(epoch),
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// `lr * lr_decay^floor(epoch / lr_decay_every)`, epochs counted from 0.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    /// Linear from the start value at epoch 0 to the end value at the final
    /// epoch `epochs - 1`, held there afterwards. A single-epoch run uses
    /// the start value.
    pub fn bn_momentum_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.bn_momentum_start;
        }
        let t = (epoch as f64 / (self.epochs - 1) as f64).min(1.0);
        self.bn_momentum_start + t * (self.bn_momentum_end - self.bn_momentum_start)
    }
}

/// Fails unless the dataset carries the labels the model task needs, in
/// range.
pub fn check_compatible(task: Task, num_classes: usize, data: &Dataset) -> Result<()> {
    match (task, data.label_mode) {
        (Task::Classification, LabelMode::Class) | (Task::Segmentation, LabelMode::Parts) => {}
        (t, m) => {
            return Err(Error::Data(format!("a {t:?} model cannot use a dataset labelled {m:?}")));
        }
    }
    data.check_labels(num_classes)
}

fn assemble<T: Real>(samples: &[&CloudSample], clouds: Vec<Vec<[f64; 3]>>) -> Result<Batch<T>> {
    Batch::assemble(&clouds, samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: u32,
    pub samples: usize,
    /// Accuracy (classification) or mean shape IoU (segmentation).
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    /// Overall accuracy or mIoU over shapes.
    pub metric: f64,
    pub per_category: Vec<CategoryScore>,
    /// Predicted class per sample, or part labels per sample.
    pub predictions: Vec<Vec<usize>>,
}

/// Evaluation-mode loss and metric over a whole dataset.
///
/// Segmentation predictions are restricted to the parts that occur in the
/// sample's category within `data`.
pub fn evaluate<T: Real>(net: &Network<T>, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    let cfg = &net.config;
    check_compatible(cfg.task, cfg.num_classes, data)?;
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let allowed = category_parts(data);
    let refs: Vec<&CloudSample> = data.samples.iter().collect();
    let (mut loss_sum, mut predictions, mut scores) = (0.0, Vec::new(), Vec::new());
    for chunk in refs.chunks(batch_size.max(1)) {
        let batch: Batch<T> = assemble(chunk, chunk.iter().map(|s| to_f64(&s.points)).collect())?;
        let mut ctx = Ctx::new(&net.store, ForwardMode::eval());
        let fwd = net.forward(&mut ctx, &batch.points, batch.layout, None)?;
        let targets = match cfg.task {
            Task::Classification => Targets::Classes(&batch.categories),
            Task::Segmentation => Targets::Parts(&batch.parts),
        };
        let parts = loss(&mut ctx.tape, &fwd, targets, cfg)?;
        loss_sum += ctx.tape.value(parts.total).item().as_f64() * chunk.len() as f64;
        let logits = ctx.tape.value(fwd.logits).to_f64_vec();
        let c = cfg.num_classes;
        match cfg.task {
            Task::Classification => {
                for (b, s) in chunk.iter().enumerate() {
                    let pred = restricted_argmax(&logits[b * c..(b + 1) * c], &[]);
                    scores.push((s.category, (pred == s.category as usize) as u8 as f64));
                    predictions.push(vec![pred]);
                }
            }
            Task::Segmentation => {
                let p = batch.layout.particles;
                for (b, s) in chunk.iter().enumerate() {
                    let ok = allowed.get(&s.category).map_or(&[][..], |v| v.as_slice());
                    let pred: Vec<usize> = (0..p)
                        .map(|i| {
                            let r = b * p + i;
                            restricted_argmax(&logits[r * c..(r + 1) * c], ok)
                        })
                        .collect();
                    scores.push((s.category, shape_iou(&pred, &batch.parts[b * p..(b + 1) * p], ok)));
                    predictions.push(pred);
                }
            }
        }
    }
    let metric = scores.iter().map(|s| s.1).sum::<f64>() / scores.len() as f64;
    let mut per: std::collections::BTreeMap<u32, (usize, f64)> = Default::default();
    for (c, v) in &scores {
        let e = per.entry(*c).or_default();
        e.0 += 1;
        e.1 += v;
    }
    Ok(EvalReport {
        loss: loss_sum / data.len() as f64,
        metric,
        per_category: per
            .into_iter()
            .map(|(category, (n, s))| CategoryScore {
                category,
                samples: n,
                score: s / n as f64,
            })
            .collect(),
        predictions,
    })
}

/// One epoch's entry in the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub bn_momentum: f64,
    /// Mean training-mode loss over the epoch's batches.
    pub train_loss: f64,
    pub train_metric: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_metric: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,metric,lr";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EpochRecord {
    /// Rows for the metrics CSV, without the header.
    pub fn csv_rows(&self) -> String {
        let mut s = format!(
            "{},train,{},{},{}\n",
            self.epoch,
            self.train_loss,
            fmt_opt(self.train_metric),
            self.lr
        );
        if self.test_loss.is_some() {
            s += &format!(
                "{},test,{},{},{}\n",
                self.epoch,
                fmt_opt(self.test_loss),
                fmt_opt(self.test_metric),
                self.lr
            );
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitOutcome {
    /// Ran the configured number of epochs.
    Completed,
    /// Metric targets were reached early.
    TargetReached,
}

/// Model, optimizer state and progress of one training run. All
/// randomness in an epoch derives from `(seed, epoch)`, so a run resumed
/// from a checkpoint continues exactly like an uninterrupted one.
pub struct Trainer<T: Real> {
    pub net: Network<T>,
    pub optim: OptimConfig,
    pub adam: AdamState<T>,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

const TRAIN_STREAM: u64 = 0x7472_6169_6e5f_7331;

impl<T: Real> Trainer<T> {
    pub fn new(net: Network<T>, optim: OptimConfig, seed: u64) -> Result<Self> {
        optim.validate()?;
        let adam = AdamState::new(&net.store);
        Ok(Self {
            net,
            optim,
            adam,
            seed,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// One optimizer update on a batch; returns the loss before the update.
    pub fn step(&mut self, batch: &Batch<T>, epoch: usize, dropout_seed: u64) -> Result<f64> {
        let cfg = &self.net.config;
        let mode = ForwardMode::train(self.optim.bn_momentum_at(epoch), dropout_seed);
        let (value, mut grads, updates) = {
            let mut ctx = Ctx::new(&self.net.store, mode);
            let fwd = self.net.forward(&mut ctx, &batch.points, batch.layout, None)?;
            let targets = match cfg.task {
                Task::Classification => Targets::Classes(&batch.categories),
                Task::Segmentation => Targets::Parts(&batch.parts),
            };
            let parts = loss(&mut ctx.tape, &fwd, targets, cfg)?;
            let value = ctx.tape.value(parts.total).item().as_f64();
            ctx.tape.backward(parts.total)?;
            let grads = ctx.gradients();
            (value, grads, ctx.into_buffer_updates())
        };
        if let Some(c) = self.optim.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        let t = self.adam.step + 1;
        adamw_step(&mut self.net.store, &grads, &mut self.adam, &self.optim.hyper(epoch), t)?;
        commit_buffers(&mut self.net.store, updates);
        Ok(value)
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed ^ TRAIN_STREAM, epoch as u64))
    }

    /// Trains one epoch over shuffled, augmented batches; returns the mean
    /// batch loss weighted by batch size.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<f64> {
        check_compatible(self.net.config.task, self.net.config.num_classes, train)?;
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let epoch = self.epoch;
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.optim.batch_size) {
            let samples: Vec<&CloudSample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let clouds = samples
                .iter()
                .map(|s| augment(&to_f64(&s.points), &self.optim.augment, &mut rng))
                .collect();
            let batch = assemble(&samples, clouds)?;
            let dropout_seed = rng.random();
            total += self.step(&batch, epoch, dropout_seed)? * chunk.len() as f64;
        }
        Ok(total / train.len() as f64)
    }

    /// Trains one epoch, scores it and appends the record to the history.
    pub fn fit_epoch(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<EpochRecord> {
        let e = self.epoch;
        let train_loss = self.train_epoch(train)?;
        let bs = self.optim.batch_size;
        let train_metric = if self.optim.eval_train {
            Some(evaluate(&self.net, train, bs)?.metric)
        } else {
            None
        };
        let test_report = test.map(|d| evaluate(&self.net, d, bs)).transpose()?;
        self.epoch += 1;
        let rec = EpochRecord {
            epoch: self.epoch,
            lr: self.optim.lr_at(e),
            bn_momentum: self.optim.bn_momentum_at(e),
            train_loss,
            train_metric,
            test_loss: test_report.as_ref().map(|r| r.loss),
            test_metric: test_report.as_ref().map(|r| r.metric),
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    fn targets_reached(&self, rec: &EpochRecord) -> bool {
        let (a, b) = (self.optim.stop_train_metric, self.optim.stop_test_metric);
        if a.is_none() && b.is_none() {
            return false;
        }
        let meets = |target: Option<f64>, got: Option<f64>| target.is_none_or(|t| got.is_some_and(|g| g >= t));
        meets(a, rec.train_metric) && meets(b, rec.test_metric)
    }

    /// Runs epochs until the configured count or the metric targets. The
    /// callback sees every finished epoch (for logging and checkpoints);
    /// its error aborts training.
    pub fn fit(
        &mut self,
        train: &Dataset,
        test: Option<&Dataset>,
        mut on_epoch: impl FnMut(&Self, &EpochRecord) -> Result<()>,
    ) -> Result<FitOutcome> {
        while self.epoch < self.optim.epochs {
            let rec = self.fit_epoch(train, test)?;
            on_epoch(self, &rec)?;
            if self.targets_reached(&rec) {
                return Ok(FitOutcome::TargetReached);
            }
        }
        Ok(FitOutcome::Completed)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.history {
            s += &r.csv_rows();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules_match_examples() {
        let c = OptimConfig::default();
        assert_eq!(c.lr_at(0), 0.001);
        assert_eq!(c.lr_at(19), 0.001);
        assert!((c.lr_at(20) - 0.0008).abs() < 1e-15);
        assert!((c.lr_at(40) - 0.00064).abs() < 1e-15);
        assert_eq!(c.bn_momentum_at(0), 0.5);
        assert!((c.bn_momentum_at(199) - 0.01).abs() < 1e-9);
        assert!((c.bn_momentum_at(500) - 0.01).abs() < 1e-9);
    }

    #[test]
    fn validation_rejects_bad_settings() {
        let ok = OptimConfig::default();
        assert!(ok.validate().is_ok());
        for f in [
            |c: &mut OptimConfig| c.lr = 0.0,
            |c: &mut OptimConfig| c.lr_decay = 1.0,
            |c: &mut OptimConfig| c.batch_size = 0,
            |c: &mut OptimConfig| c.bn_momentum_end = 0.0,
            |c: &mut OptimConfig| c.grad_clip = Some(-1.0),
            |c: &mut OptimConfig| c.augment.scale_min = 2.0,
        ] {
            let mut c = ok.clone();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn csv_rows_are_stable() {
        let r = EpochRecord {
            epoch: 3,
            lr: 0.001,
            bn_momentum: 0.5,
            train_loss: 1.25,
            train_metric: Some(0.5),
            test_loss: Some(2.0),
            test_metric: Some(0.25),
        };
        assert_eq!(r.csv_rows(), "3,train,1.25,0.5,0.001\n3,test,2,0.25,0.001\n");
    }
}
