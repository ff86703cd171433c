//! Checkpoint files: a JSON manifest describing the parameter list plus a
//! little-endian 64-bit float blob in manifest order, at `<stem>.json` /
//! `<stem>.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// Opaque model/optimizer configuration recorded by the caller.
    pub meta: serde_json::Value,
    pub params: Vec<ParamInfo>,
}

fn body_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

pub fn save(meta: serde_json::Value, named: &[(String, &Tensor<f64>)], path: &Path) -> Result<()> {
    let manifest = CheckpointManifest {
        meta,
        params: named
            .iter()
            .map(|(name, t)| ParamInfo { name: name.clone(), shape: t.shape.clone() })
            .collect(),
    };
    let mut blob = Vec::new();
    for (_, t) in named {
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    fs::write(body_path(path), blob)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointManifest, Vec<Tensor<f64>>)> {
    let text = fs::read_to_string(path)?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let blob = fs::read(body_path(path))?;
    let total: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 8 {
        return Err(Error::Integrity(format!(
            "checkpoint body is {} bytes, manifest implies {}",
            blob.len(),
            total * 8
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.params.len());
    let mut offset = 0usize;
    for p in &manifest.params {
        let n: usize = p.shape.iter().product();
        let data: Vec<f64> = blob[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        offset += n * 8;
        tensors.push(Tensor::from_vec(&p.shape, data)?);
    }
    Ok((manifest, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![-0.5, 0.25]).unwrap();
        let meta = serde_json::json!({"seed": 42});
        save(meta.clone(), &[("a".into(), &a), ("b".into(), &b)], &path).unwrap();
        let (manifest, tensors) = load(&path).unwrap();
        assert_eq!(manifest.meta, meta);
        assert_eq!(manifest.params[0].name, "a");
        assert_eq!(tensors[0], a);
        assert_eq!(tensors[1], b);
    }

    #[test]
    fn truncated_body_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let a = Tensor::from_vec(&[4], vec![1.0; 4]).unwrap();
        save(serde_json::Value::Null, &[("a".into(), &a)], &path).unwrap();
        std::fs::write(path.with_extension("bin"), vec![0u8; 7]).unwrap();
        assert!(matches!(load(&path), Err(Error::Integrity(_))));
    }
}
