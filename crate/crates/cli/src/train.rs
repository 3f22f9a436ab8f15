//! The `train` command: run directories, metrics log, checkpoints and
//! resumption.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};

use advectant::checkpoint::{load_checkpoint, save_checkpoint};
use advectant::Error;
use advectant::model::Network;
use advectant::tensor::Real;
use advectant::train::{EpochRecord, FitOutcome, Trainer, METRICS_HEADER};

use crate::config::{Precision, Resolved, RunConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LAST: &str = "last";
pub const BEST: &str = "best";
pub const FINAL: &str = "final";

pub fn checkpoint_path(run: &Path, name: &str) -> PathBuf {
    run.join(CHECKPOINT_DIR).join(name)
}

pub fn write_config(run: &Path, cfg: &RunConfig) -> Result<()> {
    let path = run.join(CONFIG_FILE);
    fs::write(&path, serde_json::to_string_pretty(cfg)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_config(run: &Path) -> Result<RunConfig> {
    let path = run.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Creates an empty run directory. An existing non-empty directory is only
/// replaced when `force` is set.
pub fn prepare_run_dir(run: &Path, force: bool) -> Result<()> {
    if run.exists() {
        let occupied = fs::read_dir(run).map(|mut d| d.next().is_some()).unwrap_or(true);
        if occupied {
            if !force {
                bail!("run directory {} already exists; pass --force to overwrite it", run.display());
            }
            fs::remove_dir_all(run).with_context(|| format!("removing {}", run.display()))?;
        }
    }
    fs::create_dir_all(run).with_context(|| format!("creating {}", run.display()))
}

fn append(path: &Path, text: &str) -> advectant::Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    f.write_all(text.as_bytes()).map_err(io)
}

/// What the training loop reports back.
pub struct TrainSummary {
    pub outcome: FitOutcome,
    pub history: Vec<EpochRecord>,
    pub seconds: f64,
}

fn score(rec: &EpochRecord) -> Option<f64> {
    rec.test_metric.or(rec.train_metric)
}

fn run_loop<T: Real>(run: &Path, mut trainer: Trainer<T>, res: &Resolved, quiet: bool) -> Result<TrainSummary> {
    let metrics = run.join(METRICS_FILE);
    let mut best = trainer.history.iter().filter_map(score).fold(f64::NEG_INFINITY, f64::max);
    let every = trainer.optim.checkpoint_every;
    let start = Instant::now();
    let result = trainer.fit(&res.train, res.test.as_ref(), |t, rec| {
        append(&metrics, &rec.csv_rows())?;
        if !rec.train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {}", rec.epoch)));
        }
        if !quiet {
            eprintln!(
                "epoch {:>4}  loss {:.5}  train {}  test {}  ({:.1}s)",
                rec.epoch,
                rec.train_loss,
                rec.train_metric.map_or("-".into(), |v| format!("{v:.4}")),
                rec.test_metric.map_or("-".into(), |v| format!("{v:.4}")),
                start.elapsed().as_secs_f64()
            );
        }
        if every > 0 && rec.epoch % every == 0 {
            save_checkpoint(&checkpoint_path(run, LAST), t)?;
        }
        if let Some(s) = score(rec) {
            if s > best {
                best = s;
                save_checkpoint(&checkpoint_path(run, BEST), t)?;
            }
        }
        Ok(())
    });
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            let last = checkpoint_path(run, LAST);
            let note = if last.exists() {
                format!("last good checkpoint: {}", last.display())
            } else {
                "no checkpoint was written".to_string()
            };
            return Err(anyhow::Error::new(e).context(format!("training aborted at epoch {}; {note}", trainer.epoch + 1)));
        }
    };
    save_checkpoint(&checkpoint_path(run, LAST), &trainer)?;
    save_checkpoint(&checkpoint_path(run, FINAL), &trainer)?;
    Ok(TrainSummary {
        outcome,
        history: trainer.history,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn fresh<T: Real>(run: &Path, res: &Resolved, quiet: bool) -> Result<TrainSummary> {
    let cfg = &res.config;
    let net = Network::<T>::new(cfg.model.clone(), cfg.seed)?;
    let trainer = Trainer::new(net, cfg.optim.clone(), cfg.seed)?;
    fs::write(run.join(METRICS_FILE), format!("{METRICS_HEADER}\n"))?;
    run_loop(run, trainer, res, quiet)
}

/// Starts a new run in `run`, which must be empty unless `force` is set.
pub fn train_new(run: &Path, res: &Resolved, force: bool, quiet: bool) -> Result<TrainSummary> {
    prepare_run_dir(run, force)?;
    write_config(run, &res.config)?;
    match res.config.precision {
        Precision::F32 => fresh::<f32>(run, res, quiet),
        Precision::F64 => fresh::<f64>(run, res, quiet),
    }
}

fn resumed<T: Real>(run: &Path, res: &Resolved, quiet: bool) -> Result<TrainSummary> {
    let mut trainer = load_checkpoint::<T>(&checkpoint_path(run, LAST))
        .with_context(|| format!("loading the last checkpoint of {}", run.display()))?;
    trainer.optim.epochs = res.config.optim.epochs;
    fs::write(run.join(METRICS_FILE), trainer.metrics_csv())?;
    run_loop(run, trainer, res, quiet)
}

/// Continues a run from its last checkpoint. `epochs` may extend the
/// schedule; the metrics log is rewritten up to the checkpoint first.
pub fn train_resume(run: &Path, epochs: Option<usize>, quiet: bool) -> Result<TrainSummary> {
    let mut cfg = read_config(run)?;
    if let Some(e) = epochs {
        cfg.optim.epochs = e;
    }
    let res = Resolved::from_config(cfg)?;
    write_config(run, &res.config)?;
    match res.config.precision {
        Precision::F32 => resumed::<f32>(run, &res, quiet),
        Precision::F64 => resumed::<f64>(run, &res, quiet),
    }
}
