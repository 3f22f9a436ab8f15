//! Checkpoint directories.
//!
//! A checkpoint holds `model.json` (the model configuration),
//! `params.bin`/`params.json` (portable 32-bit parameter file) and, for
//! training checkpoints, `trainer.json` plus `state.bin`: parameters and
//! AdamW moments in full 64-bit precision so a resumed run continues
//! bit-for-bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network};
use crate::tensor::{ParamStore, Real, Tensor};
use crate::train::{AdamState, EpochRecord, OptimConfig, Trainer};

pub const MODEL_FILE: &str = "model.json";
pub const PARAMS_STEM: &str = "params";
pub const TRAINER_FILE: &str = "trainer.json";
pub const STATE_FILE: &str = "state.bin";
const STATE_MAGIC: &[u8; 4] = b"ADVS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerRecord {
    pub epoch: usize,
    pub seed: u64,
    pub adam_step: u64,
    /// `"f32"` or `"f64"`.
    pub precision: String,
    pub optim: OptimConfig,
    pub history: Vec<EpochRecord>,
}

pub fn precision_name<T: Real>() -> &'static str {
    if std::mem::size_of::<T>() == 8 {
        "f64"
    } else {
        "f32"
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn push_tensors<'a, T: Real + 'a>(out: &mut Vec<u8>, tensors: impl Iterator<Item = &'a Tensor<T>>) {
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

fn write_state<T: Real>(path: &Path, store: &ParamStore<T>, adam: &AdamState<T>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    push_tensors(&mut out, store.entries().iter().map(|e| &e.value));
    push_tensors(&mut out, adam.m.iter());
    push_tensors(&mut out, adam.v.iter());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Fills the store values and moment tensors (already shaped) from a state
/// file.
fn read_state<T: Real>(path: &Path, store: &mut ParamStore<T>, adam: &mut AdamState<T>) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != STATE_MAGIC {
        return Err(Error::format(path, "not a training state file"));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if count != store.len() {
        return Err(Error::format(path, format!("{count} tensors, model has {}", store.len())));
    }
    let expected: usize = store.entries().iter().map(|e| e.value.numel()).sum::<usize>()
        + adam.m.iter().chain(&adam.v).map(Tensor::numel).sum::<usize>();
    if bytes.len() != 16 + 8 * expected {
        return Err(Error::format(path, "size does not match the model"));
    }
    let mut vals = bytes[16..]
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = vals.next().expect("sized"));
    }
    for t in adam.m.iter_mut().chain(adam.v.iter_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v = vals.next().expect("sized"));
    }
    Ok(())
}

/// Writes the model configuration and portable parameter file.
pub fn save_model<T: Real>(dir: &Path, net: &Network<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(MODEL_FILE), &net.config)?;
    net.store.save(dir, PARAMS_STEM)
}

/// Rebuilds a network from a checkpoint directory, using the full-precision
/// state when present.
pub fn load_model<T: Real>(dir: &Path) -> Result<Network<T>> {
    let config: ModelConfig = read_json(&dir.join(MODEL_FILE))?;
    let mut net = Network::new(config, 0)?;
    let state = dir.join(STATE_FILE);
    if state.exists() {
        let mut adam = AdamState::new(&net.store);
        read_state(&state, &mut net.store, &mut adam)?;
    } else {
        net.store.load_into(dir, PARAMS_STEM)?;
    }
    Ok(net)
}

/// Saves everything needed to resume training. The directory is written
/// beside the target and swapped in, so an interrupted save leaves the
/// previous checkpoint intact.
pub fn save_checkpoint<T: Real>(dir: &Path, trainer: &Trainer<T>) -> Result<()> {
    let tmp = sibling(dir, "partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    save_model(&tmp, &trainer.net)?;
    let record = TrainerRecord {
        epoch: trainer.epoch,
        seed: trainer.seed,
        adam_step: trainer.adam.step,
        precision: precision_name::<T>().to_string(),
        optim: trainer.optim.clone(),
        history: trainer.history.clone(),
    };
    write_json(&tmp.join(TRAINER_FILE), &record)?;
    write_state(&tmp.join(STATE_FILE), &trainer.net.store, &trainer.adam)?;
    if dir.exists() {
        let old = sibling(dir, "old");
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.{tag}"))
}

pub fn read_trainer_record(dir: &Path) -> Result<TrainerRecord> {
    read_json(&dir.join(TRAINER_FILE))
}

/// Restores a trainer saved by [`save_checkpoint`].
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<Trainer<T>> {
    let config: ModelConfig = read_json(&dir.join(MODEL_FILE))?;
    let record = read_trainer_record(dir)?;
    let net = Network::new(config, 0)?;
    let mut trainer = Trainer::new(net, record.optim, record.seed)?;
    read_state(&dir.join(STATE_FILE), &mut trainer.net.store, &mut trainer.adam)?;
    trainer.adam.step = record.adam_step;
    trainer.epoch = record.epoch;
    trainer.history = record.history;
    Ok(trainer)
}
