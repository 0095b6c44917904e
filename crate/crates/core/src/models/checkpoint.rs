//! Checkpoints: `manifest.json` plus `tensors.bin` (little-endian `f64`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, ModelSpec, ParameterStore};
use crate::numcore::{AdamState, Moments, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const TENSORS: &str = "tensors.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    AdamFirst,
    AdamSecond,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    /// Offset in `f64` elements into `tensors.bin`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config_hash: String,
    pub step: u64,
    pub spec: ModelSpec,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub adam_step_count: u64,
    pub entries: Vec<TensorEntry>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `store` into directory `dir`, creating it if needed.
pub fn save_checkpoint(store: &ParameterStore, dir: &Path, config_hash: &str) -> Result<CheckpointManifest, ModelError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    let mut push = |name: &str, kind, shape: Vec<usize>, data: &[f64]| {
        entries.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape,
            offset,
        });
        offset += data.len();
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in &store.tensors {
        push(name, EntryKind::Param, t.shape().to_vec(), t.data());
    }
    for (name, m) in &store.adam.moments {
        push(name, EntryKind::AdamFirst, vec![m.first.len()], &m.first);
        push(name, EntryKind::AdamSecond, vec![m.second.len()], &m.second);
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config_hash: config_hash.to_string(),
        step: store.step,
        spec: store.spec.clone(),
        adam_beta1: store.adam.beta1,
        adam_beta2: store.adam.beta2,
        adam_eps: store.adam.eps,
        adam_step_count: store.adam.step_count,
        entries,
    };
    let tpath = dir.join(TENSORS);
    fs::write(&tpath, bytes).map_err(io(&tpath))?;
    let mpath = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(&mpath, json).map_err(io(&mpath))?;
    Ok(manifest)
}

/// Reads a checkpoint. With `expected`, the stored tensors must match the
/// layout that spec produces; the first offending tensor is named.
pub fn load_checkpoint(
    dir: &Path,
    expected: Option<&ModelSpec>,
) -> Result<(ParameterStore, CheckpointManifest), ModelError> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io(&mpath))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", mpath.display())))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let tpath = dir.join(TENSORS);
    let bytes = fs::read(&tpath).map_err(io(&tpath))?;
    if bytes.len() % 8 != 0 {
        return Err(ModelError::Checkpoint(format!("{} is not a whole number of f64 values", tpath.display())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut tensors = BTreeMap::new();
    let mut firsts = BTreeMap::new();
    let mut seconds = BTreeMap::new();
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| ModelError::Mismatch {
                name: e.name.clone(),
                detail: "data runs past the end of tensors.bin".into(),
            })?
            .to_vec();
        match e.kind {
            EntryKind::Param => {
                tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            }
            EntryKind::AdamFirst => {
                firsts.insert(e.name.clone(), data);
            }
            EntryKind::AdamSecond => {
                seconds.insert(e.name.clone(), data);
            }
        }
    }
    let mut moments = BTreeMap::new();
    for (name, first) in firsts {
        let second = seconds.remove(&name).ok_or_else(|| ModelError::Mismatch {
            name: name.clone(),
            detail: "first moment without second".into(),
        })?;
        moments.insert(name, Moments { first, second });
    }
    let store = ParameterStore {
        spec: manifest.spec.clone(),
        tensors,
        adam: AdamState {
            beta1: manifest.adam_beta1,
            beta2: manifest.adam_beta2,
            eps: manifest.adam_eps,
            step_count: manifest.adam_step_count,
            moments,
        },
        step: manifest.step,
    };
    let reference = ParameterStore::new(expected.cloned().unwrap_or_else(|| manifest.spec.clone()), 0);
    reference.check_compatible(&store)?;
    Ok((store, manifest))
}
