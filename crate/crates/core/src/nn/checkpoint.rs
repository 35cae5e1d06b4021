//! Parameter checkpoint container.
//!
//! Layout: 16-byte magic, LE `u32` manifest length, the JSON manifest, LE
//! `u32` array count, then per array its LE `u32` name length, UTF-8 name,
//! LE `u32` rows and cols, and `rows * cols` LE `f32` values in row-major
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::Mat;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 16] = b"NETDEMIX-CKPT\0\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_type: String,
    pub feature_widths: Vec<usize>,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub seed: u64,
    /// Model-specific settings (loss weights, layer plans, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn encode(manifest: &Manifest, arrays: &[(String, Mat)]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, m) in arrays {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
        for &v in m.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<(Manifest, Vec<(String, Mat)>)> {
    let mut pos = 0usize;
    let mut take = |len: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + len)
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {pos}")))?;
        pos += len;
        Ok(s)
    };
    if take(16)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
    let mlen = u32_at(take(4)?);
    let manifest: Manifest = serde_json::from_slice(take(mlen)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let count = u32_at(take(4)?);
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = u32_at(take(4)?);
        let name = std::str::from_utf8(take(nlen)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .to_string();
        let rows = u32_at(take(4)?);
        let cols = u32_at(take(4)?);
        let payload = take(rows * cols * 4)?;
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let m = Mat::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        arrays.push((name, m));
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((manifest, arrays))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes the container and a pretty-printed `<path>.json` sidecar with the
/// manifest. Returns the container's SHA-256.
pub fn save(path: &Path, manifest: &Manifest, arrays: &[(String, Mat)]) -> Result<String> {
    let bytes = encode(manifest, arrays)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: &Path) -> Result<(Manifest, Vec<(String, Mat)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}
