//! Checkpoint format: `manifest.json` (array of `{name, shape, offset}`)
//! next to `params.bin`, a raw little-endian f32 blob. Offsets are byte
//! offsets into the blob; the loader validates the total byte length.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

pub fn save<E: Scalar>(dir: &Path, entries: &[(String, &Tensor<E>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(entries.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in entries {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape.clone(),
            offset: blob.len() as u64,
        });
        for &x in &tensor.data {
            blob.extend_from_slice(&(x.to_f64c() as f32).to_le_bytes());
        }
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let manifest: Vec<ManifestEntry> =
        serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let expected: u64 = manifest
        .iter()
        .map(|e| e.shape.iter().product::<usize>() as u64 * 4)
        .sum();
    if blob.len() as u64 != expected {
        return Err(Error::Compatibility(format!(
            "checkpoint blob is {} bytes, manifest expects {}",
            blob.len(),
            expected
        )));
    }
    let mut out = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 4;
        if end > blob.len() {
            return Err(Error::Compatibility(format!(
                "manifest entry {} overruns blob",
                entry.name
            )));
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((entry.name, Tensor::new(entry.shape, data)));
    }
    Ok(out)
}

/// Copy loaded tensors into an existing parameter list, matching by name and
/// shape.
pub fn load_into<E: Scalar>(
    dir: &Path,
    mut params: Vec<(String, &mut Tensor<E>)>,
) -> Result<()> {
    let loaded = load(dir)?;
    if loaded.len() != params.len() {
        return Err(Error::Compatibility(format!(
            "checkpoint has {} tensors, model expects {}",
            loaded.len(),
            params.len()
        )));
    }
    for (name, tensor) in loaded {
        let slot = params
            .iter_mut()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Compatibility(format!("unexpected tensor {name}")))?;
        if slot.1.shape != tensor.shape {
            return Err(Error::Compatibility(format!(
                "tensor {name}: checkpoint shape {:?} vs model shape {:?}",
                tensor.shape, slot.1.shape
            )));
        }
        *slot.1 = tensor.cast();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_and_length_validation() {
        let dir = tempdir().unwrap();
        let a = Tensor::matrix(2, 3, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::row_vec(vec![-1.5f32, 0.25]);
        save(dir.path(), &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(loaded[0].1, a);
        assert_eq!(loaded[1].1, b);

        // Corrupt the blob length.
        let blob_path = dir.path().join(BLOB_FILE);
        let mut blob = std::fs::read(&blob_path).unwrap();
        blob.push(0);
        std::fs::write(&blob_path, blob).unwrap();
        assert!(load(dir.path()).is_err());
    }

    #[test]
    fn load_into_checks_shapes() {
        let dir = tempdir().unwrap();
        let a = Tensor::matrix(2, 2, vec![1.0f32; 4]);
        save(dir.path(), &[("w".into(), &a)]).unwrap();
        let mut wrong = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(load_into(dir.path(), vec![("w".into(), &mut wrong)]).is_err());
        let mut right = Tensor::<f32>::zeros(vec![2, 2]);
        load_into(dir.path(), vec![("w".into(), &mut right)]).unwrap();
        assert_eq!(right, a);
    }
}
