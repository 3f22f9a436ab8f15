//! Command-line front end for training, evaluating and inspecting
//! advective point-cloud networks.

pub mod config;
pub mod evaluate;
pub mod tools;
pub mod train;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use advectant::data::synth::SynthKind;

use config::{load_config, Overrides};
use evaluate::{DataChoice, ExportInput, Split};

pub const THREADS_ENV: &str = "ADVECTANT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "advectant", version, about = "Advective point-cloud networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct OverrideArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Advection steps; 0 disables advection.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Grid resolution per axis.
    #[arg(long)]
    pub grid: Option<usize>,
    /// PIC weight of the velocity blend (1 = PIC only).
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use 64-bit arithmetic.
    #[arg(long = "f64")]
    pub f64: bool,
}

impl OverrideArgs {
    fn to_overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            steps: self.steps,
            grid: self.grid,
            alpha: self.alpha,
            epochs: self.epochs,
            out: self.out.clone(),
            f64: self.f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model described by a configuration file.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Continue the run in this directory from its last checkpoint.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest (.json) or binary dataset; defaults to the run's own data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Take the data from this configuration file.
        #[arg(long, conflicts_with = "data")]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        #[arg(long = "f64")]
        f64: bool,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Write one PLY per advection step for a single cloud.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for the PLY sequence.
        #[arg(long)]
        out: PathBuf,
        /// Cloud to advect (normalized before use).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, conflicts_with = "input")]
        data: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["input", "data"])]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Sample index within the chosen split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long = "f64")]
        f64: bool,
        #[arg(long)]
        force: bool,
    },
    /// Generate a synthetic dataset.
    Synth {
        /// Comma-separated kinds: spheres, boxes, two-clusters, striped-cylinder.
        #[arg(long, value_delimiter = ',', required = true)]
        kind: Vec<SynthKind>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `.advp` file, or a directory of PLY files with a manifest.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Summarize a checkpoint, run directory, dataset or PLY file.
    Inspect { path: PathBuf },
}

/// Sizes the global thread pool from `ADVECTANT_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}='{v}' is not a thread count"))?;
    if n == 0 {
        bail!("{THREADS_ENV} must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            resume,
            overrides,
            force,
            quiet,
        } => {
            let summary = if let Some(run) = resume {
                let o = &overrides;
                if o.seed.is_some() || o.steps.is_some() || o.grid.is_some() || o.alpha.is_some() || o.out.is_some() || o.f64 {
                    bail!("only --epochs may change when resuming");
                }
                train::train_resume(&run, o.epochs, quiet)?
            } else {
                let path = config.expect("required by clap");
                let res = load_config(&path, &overrides.to_overrides())?;
                let out = res
                    .config
                    .out
                    .clone()
                    .context("no run directory: set 'out' in the configuration or pass --out")?;
                let s = train::train_new(&out, &res, force, quiet)?;
                println!("run directory: {}", out.display());
                s
            };
            if let Some(r) = summary.history.last() {
                println!(
                    "finished after {} epochs ({:?}, {:.1}s): train loss {:.6}, train metric {}, test metric {}",
                    r.epoch,
                    summary.outcome,
                    summary.seconds,
                    r.train_loss,
                    r.train_metric.map_or("-".into(), |v| format!("{v:.6}")),
                    r.test_metric.map_or("-".into(), |v| format!("{v:.6}"))
                );
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            split,
            format,
            f64,
            batch_size,
        } => {
            let precision = evaluate::checkpoint_precision(&checkpoint, f64)?;
            let ds = evaluate::load_split(&DataChoice { data, config }, &checkpoint, split)?;
            let (task, report) = evaluate::eval_checkpoint(&checkpoint, &ds, precision, batch_size)?;
            let name = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            match format {
                Format::Csv => print!("{}", evaluate::report_csv(name, &report)),
                Format::Text => print!("{}", evaluate::report_text(task, &report)),
            }
            Ok(())
        }
        Command::Export {
            checkpoint,
            out,
            input,
            data,
            config,
            split,
            sample,
            f64,
            force,
        } => {
            let precision = evaluate::checkpoint_precision(&checkpoint, f64)?;
            let input = match input {
                Some(p) => ExportInput::Ply(p),
                None => ExportInput::Sample(evaluate::load_split(&DataChoice { data, config }, &checkpoint, split)?, sample),
            };
            let files = evaluate::export(&checkpoint, &input, &out, precision, force)?;
            println!("wrote {} files to {}", files.len(), out.display());
            Ok(())
        }
        Command::Synth {
            kind,
            count,
            points,
            seed,
            out,
            force,
        } => {
            let d = tools::synth_to(&out, &kind, count, points, seed, force)?;
            println!("wrote {} samples to {}", d.len(), out.display());
            Ok(())
        }
        Command::Inspect { path } => {
            print!("{}", tools::inspect(&path)?);
            Ok(())
        }
    }
}
