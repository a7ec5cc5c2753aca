//! Named-parameter checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PSCKPT\0\0"                 magic, 8 bytes
//! u32                           format version (currently 1)
//! u32                           header length in bytes
//! header                        UTF-8 JSON: {"params":[{"name","shape","dtype"}...],"meta":{...}}
//! payload                       each parameter's data in header order, f64 little-endian
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"PSCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    params: Vec<ParamEntry>,
    meta: serde_json::Value,
}

fn corrupt(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Checkpoint(msg.into())
}

pub fn encode(store: &ParamStore, meta: &serde_json::Value) -> Vec<u8> {
    let params = store
        .iter()
        .map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f64".into() })
        .collect();
    let header = serde_json::to_vec(&Header { params, meta: meta.clone() }).expect("header serialises");
    let mut out = Vec::with_capacity(16 + header.len() + store.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value), AutodiffError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version} (expected {VERSION})")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("header: {e}")))?;
    let mut payload = &body[hlen..];
    let mut store = ParamStore::new();
    for entry in header.params {
        if entry.dtype != "f64" {
            return Err(corrupt(format!("unsupported dtype {}", entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        if payload.len() < n * 8 {
            return Err(corrupt(format!("truncated payload at `{}`", entry.name)));
        }
        let data =
            payload[..n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        payload = &payload[n * 8..];
        store.insert(entry.name, Tensor::new(entry.shape, data)?);
    }
    if !payload.is_empty() {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok((store, header.meta))
}

pub fn save(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<(), AutodiffError> {
    fs::write(path, encode(store, meta))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value), AutodiffError> {
    decode(&fs::read(path)?)
}

/// Reads only the parameter table of a checkpoint.
pub fn entries(bytes: &[u8]) -> Result<Vec<ParamEntry>, AutodiffError> {
    let (store, _) = decode(bytes)?;
    Ok(store
        .iter()
        .map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f64".into() })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::new(vec![1, 2], vec![0.25, -1.5]).unwrap());
        s.insert("a", Tensor::eye(2));
        s
    }

    #[test]
    fn round_trip() {
        let meta = serde_json::json!({"d_m": 4});
        let bytes = encode(&store(), &meta);
        let (back, m) = decode(&bytes).unwrap();
        assert_eq!(back, store());
        assert_eq!(m, meta);
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode(&store(), &serde_json::Value::Null);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(matches!(decode(&wrong), Err(AutodiffError::Checkpoint(m)) if m.contains("version")));
        assert!(decode(b"nonsense").is_err());
    }
}
