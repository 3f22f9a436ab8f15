//! The `synth` and `inspect` commands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use advectant::checkpoint::{load_model, read_trainer_record, MODEL_FILE};
use advectant::data::synth::{synth_dataset, SynthKind};
use advectant::data::{
    read_binary, read_ply, write_binary, write_ply, Dataset, DatasetManifest, LabelMode, ManifestEntry, PlyTable,
};
use advectant::model::Task;

use crate::train::prepare_run_dir;

fn has_ext(p: &Path, exts: &[&str]) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

/// Writes a synthetic dataset: a binary file when `out` ends in `.advp` or
/// `.bin`, otherwise a directory of PLY clouds with a `manifest.json`.
pub fn synth_to(out: &Path, kinds: &[SynthKind], count: usize, points: usize, seed: u64, force: bool) -> Result<Dataset> {
    let data = synth_dataset(kinds, count, points, seed)?;
    if has_ext(out, &["advp", "bin"]) {
        if out.exists() && !force {
            bail!("{} already exists; pass --force to overwrite it", out.display());
        }
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_binary(out, &data)?;
        return Ok(data);
    }
    prepare_run_dir(out, force)?;
    let mut files = Vec::new();
    for (i, s) in data.samples.iter().enumerate() {
        let mut properties: Vec<(String, String)> =
            ["x", "y", "z"].iter().map(|n| (n.to_string(), "float".to_string())).collect();
        if s.parts.is_some() {
            properties.push(("label".into(), "int".into()));
        }
        let rows = s
            .points
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let mut r = vec![p[0] as f64, p[1] as f64, p[2] as f64];
                if let Some(l) = &s.parts {
                    r.push(l[k] as f64);
                }
                r
            })
            .collect();
        let name = format!("sample_{i:05}.ply");
        write_ply(&out.join(&name), &PlyTable { properties, rows })?;
        files.push(ManifestEntry {
            path: name.into(),
            category: Some(s.category),
        });
    }
    let manifest = DatasetManifest {
        points_per_sample: points,
        label_mode: data.label_mode,
        seed,
        num_labels: Some(data.label_count()),
        files,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(data)
}

fn describe_dataset(d: &Dataset) -> String {
    let mode = match d.label_mode {
        LabelMode::None => "none",
        LabelMode::Class => "class",
        LabelMode::Parts => "parts",
    };
    let mut per = std::collections::BTreeMap::<u32, usize>::new();
    for s in &d.samples {
        *per.entry(s.category).or_default() += 1;
    }
    let mut s = format!(
        "dataset: {} samples of {} points, labels {mode} ({} distinct)\n",
        d.len(),
        d.points_per_sample,
        d.label_count()
    );
    for (c, n) in per {
        let _ = writeln!(s, "  category {c:>3}: {n} samples");
    }
    s
}

fn describe_checkpoint(dir: &Path) -> Result<String> {
    let net = load_model::<f64>(dir)?;
    let c = &net.config;
    let task = match c.task {
        Task::Classification => "classification",
        Task::Segmentation => "segmentation",
    };
    let mut s = format!(
        "checkpoint: {task}, {} labels, grid {}, {} steps, alpha {}\nlearnable parameters: {}\n",
        c.num_classes,
        c.grid,
        c.advection.steps,
        c.advection.alpha,
        net.param_count()
    );
    if let Ok(r) = read_trainer_record(dir) {
        let _ = writeln!(s, "trained {} epochs ({}), seed {}", r.epoch, r.precision, r.seed);
        if let Some(h) = r.history.last() {
            let _ = writeln!(
                s,
                "last epoch: loss {:.6}, train metric {}, test metric {}",
                h.train_loss,
                h.train_metric.map_or("-".into(), |v| format!("{v:.6}")),
                h.test_metric.map_or("-".into(), |v| format!("{v:.6}"))
            );
        }
    }
    for e in net.store.entries() {
        let _ = writeln!(s, "  {:<28} {:?} {:?}", e.name, e.kind, e.value.shape());
    }
    Ok(s)
}

fn describe_ply(path: &Path) -> Result<String> {
    let t = read_ply(path)?;
    let props: Vec<String> = t.properties.iter().map(|(n, ty)| format!("{n}:{ty}")).collect();
    Ok(format!("ply: {} vertices, properties {}\n", t.rows.len(), props.join(" ")))
}

/// Human-readable summary of a checkpoint directory, run directory,
/// dataset file or PLY cloud.
pub fn inspect(path: &Path) -> Result<String> {
    if path.is_dir() {
        if path.join(MODEL_FILE).exists() {
            return describe_checkpoint(path);
        }
        let run_ckpt = crate::train::checkpoint_path(path, crate::train::FINAL);
        let last = crate::train::checkpoint_path(path, crate::train::LAST);
        for c in [run_ckpt, last] {
            if c.join(MODEL_FILE).exists() {
                return Ok(format!("run directory, showing {}\n{}", c.display(), describe_checkpoint(&c)?));
            }
        }
        bail!("{} holds no checkpoint", path.display());
    }
    if has_ext(path, &["ply"]) {
        return describe_ply(path);
    }
    if has_ext(path, &["json"]) {
        let d = advectant::data::load_manifest(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(describe_dataset(&d));
    }
    let d = read_binary(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(describe_dataset(&d))
}
