//! The `eval` and `export` commands, both read-only over checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use advectant::advect::TrajectorySink;
use advectant::checkpoint::{load_model, read_trainer_record, MODEL_FILE};
use advectant::data::{load_manifest, normalize, read_binary, read_ply_cloud, to_f64, write_ply, Dataset, PlyTable};
use advectant::model::{Network, Task};
use advectant::tensor::nn::{Ctx, ForwardMode};
use advectant::tensor::{Real, Tensor};
use advectant::train::{evaluate, restricted_argmax, EvalReport};
use advectant::transfer::ParticleLayout;

use crate::config::{load_config, Overrides, Precision, Resolved};
use crate::train::{prepare_run_dir, read_config, CONFIG_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
}

/// Where `eval` and `export` find their data: an explicit dataset file, a
/// configuration file, or the configuration of the run that holds the
/// checkpoint.
#[derive(Clone, Debug, Default)]
pub struct DataChoice {
    pub data: Option<PathBuf>,
    pub config: Option<PathBuf>,
}

fn find_run_config(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint.ancestors().skip(1).take(3).find(|d| d.join(CONFIG_FILE).exists()).map(Path::to_path_buf)
}

pub fn load_split(choice: &DataChoice, checkpoint: &Path, split: Split) -> Result<Dataset> {
    if let Some(p) = &choice.data {
        let is_json = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        return Ok(if is_json { load_manifest(p)? } else { read_binary(p)? });
    }
    let res = match &choice.config {
        Some(c) => load_config(c, &Overrides::default())?,
        None => {
            let run = find_run_config(checkpoint).ok_or_else(|| {
                anyhow!("no dataset given and no run configuration found above {}", checkpoint.display())
            })?;
            Resolved::from_config(read_config(&run)?)?
        }
    };
    match split {
        Split::Train => Ok(res.train),
        Split::Test => res.test.ok_or_else(|| anyhow!("the configuration has no test split")),
    }
}

/// Precision the checkpoint was trained in, unless `f64` forces 64-bit.
pub fn checkpoint_precision(checkpoint: &Path, f64: bool) -> Result<Precision> {
    if !checkpoint.join(MODEL_FILE).exists() {
        bail!("{} is not a checkpoint directory", checkpoint.display());
    }
    if f64 {
        return Ok(Precision::F64);
    }
    Ok(match read_trainer_record(checkpoint) {
        Ok(r) if r.precision == "f64" => Precision::F64,
        _ => Precision::F32,
    })
}

pub fn eval_checkpoint(checkpoint: &Path, data: &Dataset, precision: Precision, batch: usize) -> Result<(Task, EvalReport)> {
    fn go<T: Real>(dir: &Path, data: &Dataset, batch: usize) -> Result<(Task, EvalReport)> {
        let net = load_model::<T>(dir).with_context(|| format!("loading {}", dir.display()))?;
        Ok((net.config.task, evaluate(&net, data, batch)?))
    }
    match precision {
        Precision::F32 => go::<f32>(checkpoint, data, batch),
        Precision::F64 => go::<f64>(checkpoint, data, batch),
    }
}

pub const EVAL_HEADER: &str = "split,category,samples,loss,metric";

pub fn report_csv(split: &str, r: &EvalReport) -> String {
    let n: usize = r.per_category.iter().map(|c| c.samples).sum();
    let mut s = format!("{EVAL_HEADER}\n{split},all,{n},{},{}\n", r.loss, r.metric);
    for c in &r.per_category {
        let _ = writeln!(s, "{split},{},{},,{}", c.category, c.samples, c.score);
    }
    s
}

pub fn report_text(task: Task, r: &EvalReport) -> String {
    let name = match task {
        Task::Classification => "accuracy",
        Task::Segmentation => "mIoU",
    };
    let n: usize = r.per_category.iter().map(|c| c.samples).sum();
    let mut s = format!("samples   {n}\nloss      {:.6}\n{name:<9} {:.6}\n", r.loss, r.metric);
    for c in &r.per_category {
        let _ = writeln!(s, "  category {:>3}: {:.6} over {} samples", c.category, c.score, c.samples);
    }
    s
}

/// Particle positions and velocities after every advection step (step 0
/// is the input), in input point order, plus predicted part labels for
/// segmentation models.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub positions: Vec<Vec<[f64; 3]>>,
    pub velocities: Vec<Vec<[f64; 3]>>,
    pub labels: Option<Vec<usize>>,
}

impl<T: Real> TrajectorySink<T> for Trajectory {
    fn record(&mut self, step: usize, positions: &Tensor<T>, velocities: &Tensor<T>) {
        debug_assert_eq!(step, self.positions.len());
        let rows = |t: &Tensor<T>| t.data().chunks_exact(3).map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()]).collect();
        self.positions.push(rows(positions));
        self.velocities.push(rows(velocities));
    }
}

/// Runs the network in evaluation mode on one normalized cloud and
/// records the particle state after every step.
pub fn trajectory<T: Real>(net: &Network<T>, cloud: &[[f64; 3]]) -> Result<Trajectory> {
    let p = cloud.len();
    let flat: Vec<f64> = cloud.iter().flatten().copied().collect();
    let x = Tensor::<T>::from_f64(&[p, 3], &flat)?;
    let mut traj = Trajectory::default();
    let mut ctx = Ctx::new(&net.store, ForwardMode::eval());
    let fwd = net.forward(&mut ctx, &x, ParticleLayout::single(p), Some(&mut traj))?;
    if net.config.task == Task::Segmentation {
        let logits = ctx.tape.value(fwd.logits).to_f64_vec();
        let c = net.config.num_classes;
        traj.labels = Some((0..p).map(|i| restricted_argmax(&logits[i * c..(i + 1) * c], &[])).collect());
    }
    Ok(traj)
}

/// File name of step `j` in an exported sequence.
pub fn step_file(j: usize) -> String {
    format!("step_{j:03}.ply")
}

/// Writes one PLY per step with `x y z vx vy vz` and, when present, the
/// predicted `label`. `double` columns are used for 64-bit models.
pub fn write_trajectory(dir: &Path, traj: &Trajectory, double: bool) -> Result<Vec<PathBuf>> {
    let ty = if double { "double" } else { "float" };
    let mut properties: Vec<(String, String)> =
        ["x", "y", "z", "vx", "vy", "vz"].iter().map(|n| (n.to_string(), ty.to_string())).collect();
    if traj.labels.is_some() {
        properties.push(("label".into(), "int".into()));
    }
    let mut files = Vec::new();
    for (j, (x, v)) in traj.positions.iter().zip(&traj.velocities).enumerate() {
        let rows = x
            .iter()
            .zip(v)
            .enumerate()
            .map(|(i, (p, q))| {
                let mut r = vec![p[0], p[1], p[2], q[0], q[1], q[2]];
                if let Some(l) = &traj.labels {
                    r.push(l[i] as f64);
                }
                r
            })
            .collect();
        let path = dir.join(step_file(j));
        write_ply(&path, &PlyTable { properties: properties.clone(), rows })?;
        files.push(path);
    }
    Ok(files)
}

/// Input of an export: a PLY file, or sample `index` of a dataset.
pub enum ExportInput {
    Ply(PathBuf),
    Sample(Dataset, usize),
}

impl ExportInput {
    fn cloud(&self) -> Result<Vec<[f64; 3]>> {
        match self {
            ExportInput::Ply(p) => {
                let (pts, _) = read_ply_cloud(p)?;
                if pts.is_empty() {
                    bail!("{} has no vertices", p.display());
                }
                Ok(normalize(&to_f64(&pts)))
            }
            ExportInput::Sample(d, i) => {
                let s = d
                    .samples
                    .get(*i)
                    .ok_or_else(|| anyhow!("sample {i} out of range ({} samples)", d.len()))?;
                Ok(to_f64(&s.points))
            }
        }
    }
}

pub fn export(checkpoint: &Path, input: &ExportInput, out: &Path, precision: Precision, force: bool) -> Result<Vec<PathBuf>> {
    let cloud = input.cloud()?;
    let traj = match precision {
        Precision::F32 => trajectory(&load_model::<f32>(checkpoint)?, &cloud)?,
        Precision::F64 => trajectory(&load_model::<f64>(checkpoint)?, &cloud)?,
    };
    prepare_run_dir(out, force)?;
    write_trajectory(out, &traj, precision == Precision::F64)
}
