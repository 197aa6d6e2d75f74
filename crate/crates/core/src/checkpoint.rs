//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SPKXL1"
//! u64            manifest length in bytes
//! manifest       UTF-8 JSON: {"config": {...}, "meta": {...},
//!                "tensors": [{"name", "shape", "offset"}]}
//! data           raw f64 values; `offset` is in bytes from the start of data
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"SPKXL1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(params: &ModelParams, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(params.store.len());
    for (name, t) in params.store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.len() as u64;
    }
    let manifest = serde_json::to_vec(&Manifest {
        config: params.config.clone(),
        meta: meta.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for t in params.store.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, serde_json::Value)> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing SPKXL1 magic"));
    }
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&bytes[6..14]);
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let data_start = 14usize
        .checked_add(manifest_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[14..data_start])?;
    let data = &bytes[data_start..];
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 8 * n;
        if end > data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` runs past end of file",
                entry.name
            )));
        }
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        named.push((entry.name.clone(), Tensor::new(entry.shape.clone(), values)?));
    }
    let params = ModelParams::from_named(&manifest.config, named)?;
    Ok((params, manifest.meta))
}

pub fn save(path: impl AsRef<Path>, params: &ModelParams, meta: &serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(params, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelParams, serde_json::Value)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        ModelParams::init(&ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 10,
            n_labels: 3,
            seed: 9,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let meta = serde_json::json!({"note": "x"});
        let bytes = to_bytes(&p, &meta).unwrap();
        assert_eq!(&bytes[..6], b"SPKXL1");
        let (back, meta_back) = from_bytes(&bytes).unwrap();
        assert_eq!(meta_back, meta);
        for (a, b) in p.store.tensors().iter().zip(back.store.tensors()) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(to_bytes(&back, &meta).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&params(), &serde_json::Value::Null).unwrap();
        assert!(from_bytes(b"NOPE").is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(from_bytes(&wrong).is_err());
    }
}
