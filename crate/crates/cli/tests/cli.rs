use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advectant::checkpoint::{load_model, read_trainer_record, save_model};
use advectant::data::read_ply;
use advectant_cli::config::{load_config, Overrides};
use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_advectant"));
    c.env("ADVECTANT_THREADS", "1");
    c
}

fn exec(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = exec(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn tiny_config() -> Value {
    json!({
        "seed": 3,
        "precision": "f64",
        "data": {
            "train": {"synth": ["spheres", "boxes"], "count": 8, "points": 24, "seed": 1},
            "test": {"synth": ["spheres", "boxes"], "count": 4, "points": 24, "seed": 2}
        },
        "model": {
            "grid": 4,
            "init_widths": [16, 16],
            "global_width": 16,
            "head_widths": [16],
            "advection": {"reduce_width": 4, "conv_widths": [4, 4, 4], "velocity_hidden": 4}
        },
        "optim": {
            "batch_size": 4,
            "epochs": 2,
            "checkpoint_every": 1,
            "bn_momentum_start": 0.1,
            "bn_momentum_end": 0.1
        }
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Setup {
    dir: TempDir,
    config: PathBuf,
}

fn setup(v: Value) -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.json", &v);
    Setup { dir, config }
}

impl Setup {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(out);
        let mut args = vec!["train", "--config", s(&self.config), "--out", s(&out), "-q"];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

fn metrics(run: &Path) -> String {
    fs::read_to_string(run.join("metrics.csv")).unwrap()
}

#[test]
fn one_epoch_writes_log_config_and_checkpoints() {
    let st = setup(tiny_config());
    let run = st.train("r", &["--epochs", "1"]);
    let log = metrics(&run);
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,split,loss,metric,lr");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,train,") && lines[2].starts_with("1,test,"));
    let cfg: Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["optim"]["epochs"], 1);
    assert_eq!(cfg["model"]["task"], "classification");
    assert_eq!(cfg["model"]["num_classes"], 2);
    for c in ["last", "final", "best"] {
        assert!(run.join("checkpoints").join(c).join("model.json").exists(), "{c}");
    }
}

#[test]
fn same_seed_reproduces_the_log() {
    let st = setup(tiny_config());
    let a = st.train("a", &[]);
    let b = st.train("b", &[]);
    assert_eq!(metrics(&a), metrics(&b));
    let c = st.train("c", &["--seed", "4"]);
    assert_ne!(metrics(&a), metrics(&c));
}

#[test]
fn existing_run_directory_needs_force() {
    let st = setup(tiny_config());
    let run = st.train("r", &["--epochs", "1"]);
    let again = run_args(&st, &run, &[]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let forced = run_args(&st, &run, &["--force"]);
    assert!(forced.status.success());
}

fn run_args(st: &Setup, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", s(&st.config), "--out", s(out), "--epochs", "1", "-q"];
    args.extend_from_slice(extra);
    exec(&args)
}

#[test]
fn flags_override_the_file() {
    let st = setup(tiny_config());
    let run = st.train("r", &["--epochs", "1", "--steps", "0", "--grid", "5", "--alpha", "1"]);
    let cfg: Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["model"]["advection"]["steps"], 0);
    assert_eq!(cfg["model"]["grid"], 5);
    assert_eq!(cfg["model"]["advection"]["alpha"], 1.0);
    let out = st.path("traj");
    ok(&["export", "--checkpoint", s(&run.join("checkpoints/final")), "--out", s(&out)]);
    assert_eq!(fs::read_dir(&out).unwrap().count(), 1);
}

#[test]
fn eval_matches_the_last_logged_test_row() {
    let st = setup(tiny_config());
    let run = st.train("r", &[]);
    let log = metrics(&run);
    let last_test: Vec<&str> = log.lines().filter(|l| l.contains(",test,")).last().unwrap().split(',').collect();
    let out = ok(&["eval", "--checkpoint", s(&run.join("checkpoints/final")), "--format", "csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("split,category,samples,loss,metric"));
    let all: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&all[..3], ["test", "all", "4"]);
    assert_eq!(all[3], last_test[2], "loss");
    assert_eq!(all[4], last_test[3], "metric");
    assert_eq!(lines.count(), 2, "one row per category");
}

#[test]
fn eval_of_a_missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = exec(&["eval", "--checkpoint", s(&dir.path().join("nothing"))]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn invalid_configuration_is_reported() {
    let mut v = tiny_config();
    v["model"]["grid_size"] = json!(8);
    let st = setup(v);
    let out = run_args(&st, &st.path("r"), &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.grid_size"));
    assert!(!st.path("r").exists());

    let mut v = tiny_config();
    v["model"]["label_confidence"] = json!(1.5);
    let st = setup(v);
    assert!(!run_args(&st, &st.path("r"), &[]).status.success());
}

#[test]
fn export_writes_one_file_per_step_with_the_input_first() {
    let st = setup(tiny_config());
    let run = st.train("r", &["--epochs", "1"]);
    let out = st.path("traj");
    ok(&["export", "--checkpoint", s(&run.join("checkpoints/final")), "--out", s(&out), "--sample", "1"]);
    let names: Vec<String> = {
        let mut v: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        v.sort();
        v
    };
    assert_eq!(names, ["step_000.ply", "step_001.ply", "step_002.ply"]);
    let res = load_config(&st.config, &Overrides::default()).unwrap();
    let input = &res.test.unwrap().samples[1].points;
    let t0 = read_ply(&out.join("step_000.ply")).unwrap();
    let props: Vec<&str> = t0.properties.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(props, ["x", "y", "z", "vx", "vy", "vz"]);
    for (row, p) in t0.rows.iter().zip(input) {
        assert_eq!([row[0], row[1], row[2]], p.map(f64::from));
        assert_eq!(&row[3..], [0.0; 3]);
    }
    let again = exec(&["export", "--checkpoint", s(&run.join("checkpoints/final")), "--out", s(&out)]);
    assert!(!again.status.success(), "export does not overwrite without --force");
}

#[test]
fn zero_velocity_weights_keep_particles_in_place() {
    let st = setup(tiny_config());
    let run = st.train("r", &["--epochs", "1"]);
    let mut net = load_model::<f64>(&run.join("checkpoints/final")).unwrap();
    let ids: Vec<_> = net.store.ids().filter(|&id| net.store.entry(id).name.contains(".velocity")).collect();
    assert!(!ids.is_empty());
    for id in ids {
        net.store.get_mut(id).data_mut().fill(0.0);
    }
    let still = st.path("still");
    save_model(&still, &net).unwrap();
    let out = st.path("traj");
    ok(&["export", "--checkpoint", s(&still), "--out", s(&out), "--config", s(&st.config), "--f64"]);
    let first = read_ply(&out.join("step_000.ply")).unwrap();
    for j in 1..=2 {
        let t = read_ply(&out.join(format!("step_{j:03}.ply"))).unwrap();
        for (a, b) in t.rows.iter().zip(&first.rows) {
            assert_eq!(a[..3], b[..3]);
            assert_eq!(a[3..], [0.0; 3]);
        }
    }
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let st = setup(tiny_config());
    let full = st.train("full", &[]);
    let part = st.train("part", &["--epochs", "1"]);
    ok(&["train", "--resume", s(&part), "--epochs", "2", "-q"]);
    assert_eq!(metrics(&full), metrics(&part));
    assert_eq!(read_trainer_record(&part.join("checkpoints/final")).unwrap().epoch, 2);
    let bad = exec(&["train", "--resume", s(&part), "--steps", "3"]);
    assert!(!bad.status.success());
}

#[test]
fn divergence_aborts_and_keeps_the_last_good_checkpoint() {
    let mut v = tiny_config();
    v["data"].as_object_mut().unwrap().remove("test");
    v["optim"]["lr"] = json!(1e300);
    v["optim"]["batch_size"] = json!(8);
    v["optim"]["eval_train"] = json!(false);
    v["optim"]["grad_clip"] = Value::Null;
    v["optim"]["epochs"] = json!(5);
    let st = setup(v);
    let run_dir = st.path("r");
    let out = exec(&["train", "--config", s(&st.config), "--out", s(&run_dir), "-q"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("last good checkpoint"), "{err}");
    let rec = read_trainer_record(&run_dir.join("checkpoints/last")).unwrap();
    assert!(rec.epoch >= 1 && rec.epoch < 5);
    assert!(rec.history.iter().all(|r| r.train_loss.is_finite()));
    assert!(!run_dir.join("checkpoints/final").exists());
}

#[test]
fn synthetic_manifest_trains_and_inspects() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cyl");
    ok(&["synth", "--kind", "striped-cylinder", "--count", "4", "--points", "32", "--seed", "5", "--out", s(&data)]);
    let text = String::from_utf8(ok(&["inspect", s(&data.join("manifest.json"))]).stdout).unwrap();
    assert!(text.contains("4 samples of 32 points, labels parts"), "{text}");
    let bin = dir.path().join("cls.advp");
    ok(&["synth", "--kind", "spheres,two-clusters", "--count", "6", "--points", "16", "--out", s(&bin)]);
    assert!(String::from_utf8(ok(&["inspect", s(&bin)]).stdout).unwrap().contains("labels class (2 distinct)"));

    let mut v = tiny_config();
    v["data"] = json!({"train": {"manifest": "cyl/manifest.json"}});
    v["model"]["head_widths"] = json!([8]);
    let config = write_config(dir.path(), "seg.json", &v);
    let run_dir = dir.path().join("seg-run");
    ok(&["train", "--config", s(&config), "--out", s(&run_dir), "--epochs", "1", "-q"]);
    let cfg: Value = serde_json::from_str(&fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["model"]["task"], "segmentation");
    assert_eq!(cfg["model"]["num_classes"], 3);
    let info = String::from_utf8(ok(&["inspect", s(&run_dir)]).stdout).unwrap();
    assert!(info.contains("segmentation, 3 labels"), "{info}");
    let out = dir.path().join("traj");
    ok(&["export", "--checkpoint", s(&run_dir.join("checkpoints/final")), "--out", s(&out), "--split", "train"]);
    let t = read_ply(&out.join("step_002.ply")).unwrap();
    assert_eq!(t.properties.last().unwrap().0, "label");
    assert!(t.rows.iter().all(|r| r[6] >= 0.0 && r[6] < 3.0));
}

#[test]
fn thread_count_must_be_valid() {
    let out = bin().env("ADVECTANT_THREADS", "zero").args(["inspect", "."]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ADVECTANT_THREADS"));
}

#[test]
fn shipped_presets_resolve() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut found = 0;
    for dir in [root.clone(), root.join("ablation")] {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.extension().is_some_and(|x| x == "toml") {
                let r = load_config(&p, &Overrides::default()).unwrap_or_else(|e| panic!("{}: {e:#}", p.display()));
                assert!(r.config.out.is_some(), "{}", p.display());
                found += 1;
            }
        }
    }
    assert!(found >= 16);
}
