//! Checkpoint container.
//!
//! Layout: the 8-byte magic `CSPKCKPT`, a little-endian `u64` header length,
//! a JSON header (format version, model config, named tensors with shapes
//! and offsets, free-form metadata), then every tensor as little-endian
//! `f32` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::Params;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CSPKCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the data section.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn to_bytes(params: &Params<f32>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, t) in params.tensors() {
        entries.push(TensorEntry {
            name,
            shape: t.shape.clone(),
            offset,
        });
        offset += t.len();
    }
    let header = Header {
        version: FORMAT_VERSION,
        dtype: "f32".into(),
        config: params.config.clone(),
        tensors: entries,
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.tensors() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Params<f32>, serde_json::Value)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json)?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    if header.dtype != "f32" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
    }
    header.config.validate()?;
    let data = &bytes[16 + hlen..];
    let mut params: Params<f32> = Params::zeros(&header.config);
    let expected = params.tensors().len();
    if header.tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, config implies {expected}",
            header.tensors.len()
        )));
    }
    for ((name, t), entry) in params.tensors_mut().into_iter().zip(&header.tensors) {
        if entry.name != name || entry.shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {name} {:?}",
                entry.name, entry.shape, t.shape
            )));
        }
        let start = entry.offset * 4;
        let raw = data
            .get(start..start + t.len() * 4)
            .ok_or_else(|| bad("truncated tensor data"))?;
        for (v, chunk) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok((params, header.meta))
}

pub fn save(path: impl AsRef<Path>, params: &Params<f32>, meta: serde_json::Value) -> Result<()> {
    fs::write(path, to_bytes(params, meta)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(Params<f32>, serde_json::Value)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|_| Error::MissingPath(path.to_path_buf()))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_everything() {
        let p: Params<f32> = Params::init(&ModelConfig::speaker(5, 2, 4), 11);
        let meta = serde_json::json!({"role": "speaker"});
        let (back, m) = from_bytes(&to_bytes(&p, meta.clone()).unwrap()).unwrap();
        assert_eq!(back, p);
        assert_eq!(m, meta);
    }

    #[test]
    fn rejects_corruption() {
        let p: Params<f32> = Params::init(&ModelConfig::converter(5), 1);
        let bytes = to_bytes(&p, serde_json::Value::Null).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut v = bytes.clone();
        let pos = v.windows(11).position(|w| w == b"\"version\":1").unwrap();
        v[pos + 10] = b'9';
        assert!(matches!(from_bytes(&v), Err(Error::Checkpoint(m)) if m.contains("version 9")));
    }
}
