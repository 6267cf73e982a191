//! Checkpoint container: `manifest.json` describing every tensor plus a flat
//! little-endian `f32` blob in `weights.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &str = "HSEG1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub magic: String,
    pub step: u64,
    /// Model configuration, stored opaquely so this module stays independent
    /// of the architecture code.
    pub model: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save<T: Scalar>(dir: &Path, store: &ParamStore<T>, model: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: &str, kind: TensorKind, t: &Tensor<T>| {
        tensors.push(TensorEntry { name: name.to_string(), kind, shape: t.shape().to_vec(), offset: blob.len() as u64 });
        for v in t.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    };
    for (_, p) in store.params() {
        push(&p.name, TensorKind::Param, &p.value);
    }
    for (_, b) in store.buffers() {
        push(&b.name, TensorKind::Buffer, &b.value);
    }
    let manifest = Manifest { magic: CHECKPOINT_MAGIC.to_string(), step: store.step(), model, tensors };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e))?;
    if manifest.magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {:?}, expected {CHECKPOINT_MAGIC}", manifest.magic)));
    }
    Ok(manifest)
}

/// Overwrites every tensor of `store` with the checkpoint contents. Names
/// and shapes must match exactly.
pub fn load_into<T: Scalar>(dir: &Path, store: &mut ParamStore<T>) -> Result<Manifest> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let expected = store.len() + store.buffers().count();
    if manifest.tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {expected}",
            manifest.tensors.len()
        )));
    }
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 4;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::corrupt(&blob_path, format!("tensor {} out of range", entry.name)))?;
        let values: Vec<T> = bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let target = match entry.kind {
            TensorKind::Param => store.id(&entry.name).map(|id| store.value_mut(id)),
            TensorKind::Buffer => store.buffer_id(&entry.name).map(|id| store.buffer_mut(id)),
        }
        .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
        if target.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {}: checkpoint {:?}, model {:?}",
                entry.name,
                entry.shape,
                target.shape()
            )));
        }
        target.data_mut().copy_from_slice(&values);
    }
    store.set_step(manifest.step);
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_tensors_and_step() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, 1e-3]).unwrap()).unwrap();
        store.add_buffer("a.running", Tensor::from_vec(&[2], vec![0.5, 7.0]).unwrap()).unwrap();
        store.set_step(42);
        save(dir.path(), &store, serde_json::json!({"k": 3})).unwrap();

        let mut other = ParamStore::<f32>::new();
        let a = other.add("a", Tensor::zeros(&[2, 2])).unwrap();
        let b = other.add_buffer("a.running", Tensor::zeros(&[2])).unwrap();
        let manifest = load_into(dir.path(), &mut other).unwrap();
        assert_eq!(manifest.model["k"], 3);
        assert_eq!(other.get(a).value, store.get(a).value);
        assert_eq!(other.buffer(b).data(), &[0.5, 7.0]);
        assert_eq!(other.step(), 42);
    }

    #[test]
    fn wrong_magic_and_shape_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[3])).unwrap();
        save(dir.path(), &store, serde_json::Value::Null).unwrap();

        let mut wrong = ParamStore::<f32>::new();
        wrong.add("a", Tensor::zeros(&[4])).unwrap();
        assert!(matches!(load_into(dir.path(), &mut wrong), Err(Error::Checkpoint(_))));

        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("HSEG1", "HSEG0");
        fs::write(&path, text).unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::Checkpoint(_))));
    }
}
