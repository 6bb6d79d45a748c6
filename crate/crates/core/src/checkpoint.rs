//! Parameter checkpoints: a JSON index of `(name, shape, offset)` entries
//! next to a flat file of little-endian `f64` values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "anrlab-params-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data file, in values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: String,
    pub data_file: String,
    pub entries: Vec<CheckpointEntry>,
}

fn data_path(index: &Path) -> PathBuf {
    index.with_extension("bin")
}

/// Writes `<path>` (JSON index) and `<path>.bin` (with the extension replaced).
pub fn save_params(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bin = data_path(path);
    let mut bytes = Vec::with_capacity(store.numel() * 8);
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (_, name, t) in store.iter() {
        entries.push(CheckpointEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let index = CheckpointIndex {
        format: CHECKPOINT_FORMAT.to_string(),
        data_file: bin
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        entries,
    };
    std::fs::write(&bin, bytes)?;
    std::fs::write(path, serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

/// Reads a checkpoint into a new store, preserving order and names.
pub fn load_params(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let index: CheckpointIndex = serde_json::from_slice(&std::fs::read(path)?)?;
    if index.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", index.format)));
    }
    let bin = path.with_file_name(&index.data_file);
    let bytes = std::fs::read(&bin)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("{} is not a whole number of f64 values", bin.display())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let mut store = ParamStore::new();
    for e in index.entries {
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("{} runs past the end of the data file", e.name)))?;
        store.add(e.name, Tensor::new(e.shape, slice.to_vec())?);
    }
    Ok(store)
}

/// Copies values from `loaded` into `store`, matching by name and shape.
pub fn restore_into(store: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    if store.len() != loaded.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            loaded.len(),
            store.len()
        )));
    }
    for (_, name, t) in loaded.iter() {
        let id = store
            .id_of(name)
            .ok_or_else(|| Error::Checkpoint(format!("model has no parameter {name}")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    #[test]
    fn bit_exact_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Prng::new(0);
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::from_fn(vec![3, 4], |_| rng.normal()));
        store.add("a.bias", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300]));
        store.add("s", Tensor::scalar(std::f64::consts::PI));
        let path = dir.path().join("params.json");
        save_params(&store, &path).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back.len(), 3);
        for ((_, n1, t1), (_, n2, t2)) in store.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        let mut target = ParamStore::new();
        target.add("a.weight", Tensor::zeros(vec![3, 4]));
        target.add("a.bias", Tensor::zeros(vec![3]));
        target.add("s", Tensor::scalar(0.0));
        restore_into(&mut target, &back).unwrap();
        assert_eq!(target.tensors(), store.tensors());
    }

    #[test]
    fn truncated_data_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(vec![10]));
        let path = dir.path().join("p.json");
        save_params(&store, &path).unwrap();
        std::fs::write(dir.path().join("p.bin"), [0u8; 16]).unwrap();
        assert!(matches!(load_params(&path), Err(Error::Checkpoint(_))));
    }
}
