//! Checkpoint files: `<base>.ckpt.json` describes the tensors, `<base>.ckpt.bin`
//! holds them as little-endian `f32`, concatenated in table order. Offsets
//! and lengths in the table count elements, not bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ArchConfig, NamedParam, RegressionNet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// What the network was trained on; checked before prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSignature {
    pub channels: usize,
    pub sensors: Vec<String>,
    pub time_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputSignature>,
    pub parameters: Vec<ParamEntry>,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.as_os_str().to_string_lossy();
    (
        PathBuf::from(format!("{s}.ckpt.json")),
        PathBuf::from(format!("{s}.ckpt.bin")),
    )
}

/// Writes named `f32` tensors in the checkpoint layout.
pub fn write_tensor_file(
    base: &Path,
    arch: Option<&ArchConfig>,
    input: Option<&InputSignature>,
    tensors: &[(&str, &[usize], &[f32])],
) -> Result<()> {
    let (json_path, bin_path) = paths(base);
    let mut offset = 0;
    let mut parameters = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, shape, data) in tensors {
        parameters.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
        offset += data.len();
        blob.reserve(data.len() * 4);
        for v in *data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        arch: arch.cloned(),
        input: input.cloned(),
        parameters,
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&json_path, e))?;
    text.push('\n');
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    std::fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))
}

/// Reads the table and every tensor, validating the blob against it.
pub fn read_tensor_file(base: &Path) -> Result<(CheckpointManifest, Vec<(String, Tensor<f32>)>)> {
    let (json_path, bin_path) = paths(base);
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {} is not supported (expected {CHECKPOINT_VERSION})",
            json_path.display(),
            manifest.version
        )));
    }
    let blob = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if blob.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!(
            "{}: length {} is not a whole number of f32 values",
            bin_path.display(),
            blob.len()
        )));
    }
    let available = blob.len() / 4;
    let mut tensors = Vec::with_capacity(manifest.parameters.len());
    let mut expected_end = 0;
    for entry in &manifest.parameters {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + numel;
        if entry.offset != expected_end {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` starts at {} but the previous one ends at {expected_end}",
                entry.name, entry.offset
            )));
        }
        if end > available {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` needs elements {}..{end} but {} holds only {available}",
                entry.name,
                entry.offset,
                bin_path.display()
            )));
        }
        let data = blob[entry.offset * 4..end * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        expected_end = end;
    }
    if expected_end != available {
        return Err(Error::Checkpoint(format!(
            "{} holds {available} values but the table describes {expected_end}",
            bin_path.display()
        )));
    }
    Ok((manifest, tensors))
}

pub fn save_checkpoint(net: &RegressionNet<f32>, input: Option<&InputSignature>, base: &Path) -> Result<()> {
    let tensors: Vec<(&str, &[usize], &[f32])> = net
        .params()
        .iter()
        .map(|p| (p.name.as_str(), p.tensor.shape(), p.tensor.data()))
        .collect();
    write_tensor_file(base, Some(net.config()), input, &tensors)
}

pub fn load_checkpoint(base: &Path) -> Result<(RegressionNet<f32>, Option<InputSignature>)> {
    let (manifest, tensors) = read_tensor_file(base)?;
    let arch = manifest
        .arch
        .ok_or_else(|| Error::Checkpoint("checkpoint has no architecture".into()))?;
    let params = tensors
        .into_iter()
        .map(|(name, tensor)| NamedParam { name, tensor })
        .collect();
    Ok((RegressionNet::from_params(arch, params)?, manifest.input))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchKind;

    fn saved() -> (tempfile::TempDir, PathBuf, RegressionNet<f32>) {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("fold_0");
        let net = RegressionNet::build(ArchConfig::preset(ArchKind::Tiny, 1), 3).unwrap();
        save_checkpoint(&net, None, &base).unwrap();
        (dir, base, net)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (_dir, base, net) = saved();
        let (loaded, _) = load_checkpoint(&base).unwrap();
        for (a, b) in net.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
    }

    #[test]
    fn truncated_blob_names_parameter() {
        let (_dir, base, _) = saved();
        let (_, bin) = paths(&base);
        let blob = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &blob[..blob.len() - 8]).unwrap();
        let err = load_checkpoint(&base).unwrap_err().to_string();
        assert!(err.contains("head.fc2"), "{err}");
    }

    #[test]
    fn version_is_checked() {
        let (_dir, base, _) = saved();
        let (json, _) = paths(&base);
        let text = std::fs::read_to_string(&json).unwrap();
        std::fs::write(&json, text.replace("\"version\": 1", "\"version\": 2")).unwrap();
        let err = load_checkpoint(&base).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }

    #[test]
    fn trailing_bytes_rejected() {
        let (_dir, base, _) = saved();
        let (_, bin) = paths(&base);
        let mut blob = std::fs::read(&bin).unwrap();
        blob.extend_from_slice(&0f32.to_le_bytes());
        std::fs::write(&bin, blob).unwrap();
        assert!(load_checkpoint(&base).is_err());
    }
}
