//! Run configuration: a TOML or JSON file merged over task defaults, with
//! command-line overrides applied last.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use advectant::data::synth::{synth_dataset, SynthKind};
use advectant::data::{load_manifest, read_binary, Dataset};
use advectant::model::{ModelConfig, Task};
use advectant::train::{check_compatible, OptimConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Where a split comes from: a synthetic generator, a manifest or a binary
/// dataset file. Exactly one of `synth`, `manifest` and `binary` is set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<Vec<SynthKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary: Option<PathBuf>,
    /// Keep only samples of this category (one model per category).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<u32>,
}

impl DataSource {
    fn check(&self) -> Result<()> {
        let set = [self.synth.is_some(), self.manifest.is_some(), self.binary.is_some()];
        if set.iter().filter(|&&b| b).count() != 1 {
            bail!("a data source needs exactly one of 'synth', 'manifest' or 'binary'");
        }
        if self.synth.is_none() && (self.count.is_some() || self.points.is_some() || self.seed.is_some()) {
            bail!("'count', 'points' and 'seed' only apply to synthetic data");
        }
        Ok(())
    }

    /// Makes file paths absolute against `base`.
    fn anchor(&mut self, base: &Path) {
        for p in [&mut self.manifest, &mut self.binary].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        self.check()?;
        let mut data = if let Some(kinds) = &self.synth {
            let count = self.count.ok_or_else(|| anyhow!("synthetic data needs 'count'"))?;
            let points = self.points.ok_or_else(|| anyhow!("synthetic data needs 'points'"))?;
            synth_dataset(kinds, count, points, self.seed.unwrap_or(0))?
        } else if let Some(p) = &self.manifest {
            load_manifest(p)?
        } else {
            let p = self.binary.as_ref().expect("checked");
            read_binary(p)?
        };
        if let Some(c) = self.category {
            data.samples.retain(|s| s.category == c);
            if data.is_empty() {
                bail!("no samples of category {c}");
            }
        }
        Ok(data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<DataSource>,
}

/// Fully resolved run configuration, as persisted in a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
}

/// Command-line values that replace configuration entries.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub grid: Option<usize>,
    pub alpha: Option<f64>,
    pub epochs: Option<usize>,
    pub out: Option<PathBuf>,
    pub f64: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.model.advection.steps = s;
        }
        if let Some(g) = self.grid {
            cfg.model.grid = g;
        }
        if let Some(a) = self.alpha {
            cfg.model.advection.alpha = a;
        }
        if let Some(e) = self.epochs {
            cfg.optim.epochs = e;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if self.f64 {
            cfg.precision = Precision::F64;
        }
    }
}

/// Parses a `.toml` or `.json` file into a JSON value.
pub fn read_value(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        let v: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(serde_json::to_value(v)?)
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Overlays `over` onto `base`. Keys absent from `base` are rejected unless
/// the base entry is `null` (an optional field), which is replaced whole.
pub fn merge(base: &mut Value, over: Value, at: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => bail!("unknown configuration key '{path}'"),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Resolved configuration together with its loaded datasets.
pub struct Resolved {
    pub config: RunConfig,
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl Resolved {
    /// Loads the datasets of an already resolved configuration.
    pub fn from_config(config: RunConfig) -> Result<Self> {
        let train = config.data.train.load().context("loading training data")?;
        let test = config.data.test.as_ref().map(|d| d.load().context("loading test data")).transpose()?;
        let r = Self { config, train, test };
        r.check()?;
        Ok(r)
    }

    fn check(&self) -> Result<()> {
        let m = &self.config.model;
        m.validate()?;
        self.config.optim.validate()?;
        check_compatible(m.task, m.num_classes, &self.train).context("training data")?;
        if let Some(t) = &self.test {
            check_compatible(m.task, m.num_classes, t).context("test data")?;
        }
        Ok(())
    }
}

/// Builds a run configuration from a raw config value. Model defaults
/// depend on the task and label count, which are taken from the `model`
/// section when given and otherwise inferred from the training data.
pub fn resolve(raw: Value, base_dir: &Path, ov: &Overrides) -> Result<Resolved> {
    let Value::Object(mut top) = raw else {
        bail!("configuration must be a table");
    };
    for k in top.keys() {
        if !["seed", "precision", "out", "data", "model", "optim"].contains(&k.as_str()) {
            bail!("unknown configuration key '{k}'");
        }
    }
    let mut data: DataConfig =
        serde_json::from_value(top.remove("data").ok_or_else(|| anyhow!("configuration has no 'data' section"))?)
            .context("data section")?;
    data.train.anchor(base_dir);
    if let Some(t) = data.test.as_mut() {
        t.anchor(base_dir);
    }
    let train = data.train.load().context("loading training data")?;
    let test = data.test.as_ref().map(|d| d.load().context("loading test data")).transpose()?;

    let model_raw = top.remove("model").unwrap_or(Value::Object(Default::default()));
    let task: Task = match model_raw.get("task") {
        Some(t) => serde_json::from_value(t.clone()).context("model.task")?,
        None if train.label_mode == advectant::data::LabelMode::Parts => Task::Segmentation,
        None => Task::Classification,
    };
    let num_classes = match model_raw.get("num_classes") {
        Some(n) => serde_json::from_value(n.clone()).context("model.num_classes")?,
        None => train.label_count().max(test.as_ref().map_or(0, Dataset::label_count)),
    };
    let defaults = match task {
        Task::Classification => ModelConfig::classification(num_classes),
        Task::Segmentation => ModelConfig::segmentation(num_classes),
    };
    let mut model = serde_json::to_value(defaults)?;
    merge(&mut model, model_raw, "model")?;
    let mut optim = serde_json::to_value(OptimConfig::default())?;
    merge(&mut optim, top.remove("optim").unwrap_or(Value::Object(Default::default())), "optim")?;

    let mut config = RunConfig {
        seed: top.remove("seed").map(serde_json::from_value).transpose().context("seed")?.unwrap_or(0),
        precision: top
            .remove("precision")
            .map(serde_json::from_value)
            .transpose()
            .context("precision")?
            .unwrap_or_default(),
        out: top.remove("out").map(serde_json::from_value).transpose().context("out")?,
        data,
        model: serde_json::from_value(model).context("model section")?,
        optim: serde_json::from_value(optim).context("optim section")?,
    };
    ov.apply(&mut config);
    let r = Resolved { config, train, test };
    r.check()?;
    Ok(r)
}

/// Reads and resolves a configuration file; data paths are relative to
/// the file.
pub fn load_config(path: &Path, ov: &Overrides) -> Result<Resolved> {
    let raw = read_value(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
    resolve(raw, &base, ov).with_context(|| format!("configuration {}", path.display()))
}
