//! Checkpoint directories: `manifest.json` plus one PTX1 file per tensor.
//!
//! Model tensors go under `tensors/`, optimizer state under `state/`. A
//! checkpoint is written to a sibling staging directory and renamed into
//! place, so a crash never leaves a half-written checkpoint behind.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, VariantSpec};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub frozen: bool,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    variant: VariantSpec,
    tensors: IndexMap<String, TensorEntry>,
    #[serde(default)]
    state: IndexMap<String, TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub state: IndexMap<String, Tensor<f32>>,
    pub meta: serde_json::Value,
}

fn staging(dir: &Path, tag: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(tag);
    dir.with_file_name(name)
}

fn write_group(
    root: &Path,
    sub: &str,
    items: impl Iterator<Item = (String, Tensor<f32>, bool)>,
) -> Result<IndexMap<String, TensorEntry>> {
    let dir = root.join(sub);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut out = IndexMap::new();
    for (name, t, frozen) in items {
        let file = format!("{sub}/{name}.ptx");
        t.save(&root.join(&file))?;
        out.insert(
            name,
            TensorEntry {
                file,
                frozen,
                shape: t.shape().to_vec(),
            },
        );
    }
    Ok(out)
}

/// Write `model`, optional optimizer `state` tensors and free-form `meta`.
/// Values are stored as f32.
pub fn save_checkpoint<T: Real>(
    dir: &Path,
    model: &Model<T>,
    state: &IndexMap<String, Tensor<f32>>,
    meta: serde_json::Value,
) -> Result<()> {
    let tmp = staging(dir, ".partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let tensors = write_group(
        &tmp,
        "tensors",
        model
            .store()
            .iter()
            .map(|(n, t)| (n.to_string(), t.cast::<f32>(), !model.is_trainable(n))),
    )?;
    let state = write_group(&tmp, "state", state.iter().map(|(n, t)| (n.clone(), t.clone(), false)))?;
    let m = Manifest {
        config: model.config().clone(),
        variant: model.variant(),
        tensors,
        state,
        meta,
    };
    let mpath = tmp.join(CHECKPOINT_MANIFEST);
    let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;

    let old = staging(dir, ".old");
    if dir.exists() {
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

fn load_entry(dir: &Path, name: &str, e: &TensorEntry) -> Result<Tensor<f32>> {
    let path = dir.join(&e.file);
    let t = Tensor::<f32>::load(&path)?;
    if t.shape() != e.shape.as_slice() {
        return Err(Error::format(
            &path,
            format!("{name}: shape {:?} disagrees with manifest {:?}", t.shape(), e.shape),
        ));
    }
    Ok(t)
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<Checkpoint<T>> {
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let mut model = Model::<T>::new(&m.config, m.variant, 0)?;
    let expected: Vec<String> = model.store().iter().map(|(n, _)| n.to_string()).collect();
    let listed: Vec<&String> = m.tensors.keys().collect();
    if expected.iter().collect::<Vec<_>>() != listed {
        let missing: Vec<_> = expected.iter().filter(|n| !m.tensors.contains_key(*n)).collect();
        let extra: Vec<_> = listed.iter().filter(|n| !expected.contains(n)).collect();
        return Err(Error::format(
            &mpath,
            format!("tensor set mismatch: missing {missing:?}, unexpected {extra:?}"),
        ));
    }
    for (name, e) in &m.tensors {
        let t = load_entry(dir, name, e)?;
        let dst = model.store_mut().by_name_mut(name).expect("name checked");
        if dst.shape() != t.shape() {
            return Err(Error::format(
                dir.join(&e.file),
                format!("{name}: shape {:?}, model expects {:?}", t.shape(), dst.shape()),
            ));
        }
        *dst = t.cast();
    }
    let mut state = IndexMap::new();
    for (name, e) in &m.state {
        state.insert(name.clone(), load_entry(dir, name, e)?);
    }
    Ok(Checkpoint {
        model,
        state,
        meta: m.meta,
    })
}

/// Manifest fields as JSON, for comparing two checkpoints' setups.
pub fn read_manifest_header(dir: &Path) -> Result<(ModelConfig, VariantSpec)> {
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    Ok((m.config, m.variant))
}
