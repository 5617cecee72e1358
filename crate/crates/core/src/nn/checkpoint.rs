//! Parameter checkpoints: an 8-byte little-endian header length, a JSON
//! header, then every tensor as little-endian `f64` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Architecture hyperparameters of the model that owns the tensors.
    pub arch: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(arch: &serde_json::Value, params: &ParamSet) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, p) in params.iter() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            dtype: "f64".into(),
            offset,
        });
        offset += p.value.len() * 8;
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        arch: arch.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, ParamSet)> {
    let bad = |m: &str| Error::Data(format!("corrupt checkpoint: {m}"));
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let data = &bytes[8 + hlen..];
    let mut params = ParamSet::new();
    for e in header.tensors {
        if e.dtype != "f64" {
            return Err(bad(&format!("unsupported dtype {}", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let raw = data
            .get(e.offset..e.offset + n * 8)
            .ok_or_else(|| bad(&format!("tensor {} out of bounds", e.name)))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(e.name, Tensor::new(e.shape, values)?);
    }
    Ok((header.arch, params))
}

pub fn save(path: &Path, arch: &serde_json::Value, params: &ParamSet) -> Result<String> {
    let bytes = encode(arch, params)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(content_hash(&bytes))
}

pub fn load(path: &Path) -> Result<(serde_json::Value, ParamSet)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

/// Hex SHA-256 of a byte buffer.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_arch() {
        let mut ps = ParamSet::new();
        ps.insert("b", Tensor::new(vec![2], vec![0.1, -3.0]).unwrap());
        ps.insert("a", Tensor::new(vec![1, 2, 2], vec![1.0, f64::MIN_POSITIVE, 7.5, -0.0]).unwrap());
        let arch = serde_json::json!({"kind": "test", "width": 4});
        let bytes = encode(&arch, &ps).unwrap();
        let (arch2, ps2) = decode(&bytes).unwrap();
        assert_eq!(arch, arch2);
        for (name, p) in ps.iter() {
            assert_eq!(p.value, ps2.get(name).unwrap().value);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::zeros(&[4]));
        let bytes = encode(&serde_json::Value::Null, &ps).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
