//! Model checkpoint files: magic, JSON header, little-endian f32 blob.
//!
//! ```text
//! "PCBCKPT1" | u32 LE header length | header JSON | f32 LE values ...
//! ```
//! The header carries `blob_len` (number of f32 values) so truncation is detected.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PCBCKPT1";

#[derive(serde::Serialize, serde::Deserialize)]
struct Envelope<H> {
    kind: String,
    blob_len: usize,
    header: H,
}

/// Encodes a checkpoint into bytes.
pub fn encode_checkpoint<H: Serialize>(kind: &str, header: &H, blob: &[f32]) -> Result<Vec<u8>> {
    let env = Envelope {
        kind: kind.to_string(),
        blob_len: blob.len(),
        header,
    };
    let json = serde_json::to_vec(&env)?;
    let mut out = Vec::with_capacity(12 + json.len() + blob.len() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_checkpoint<H: Serialize>(path: &Path, kind: &str, header: &H, blob: &[f32]) -> Result<()> {
    let bytes = encode_checkpoint(kind, header, blob)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decodes a checkpoint of the expected `kind`.
pub fn decode_checkpoint<H: DeserializeOwned>(path: &Path, bytes: &[u8], kind: &str) -> Result<(H, Vec<f32>)> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::corrupt(path, "missing checkpoint magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::corrupt(path, "truncated checkpoint header"));
    }
    let env: Envelope<H> = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::corrupt(path, format!("bad checkpoint header: {e}")))?;
    if env.kind != kind {
        return Err(Error::corrupt(
            path,
            format!("checkpoint kind `{}` where `{kind}` was expected", env.kind),
        ));
    }
    let payload = &body[hlen..];
    if payload.len() != env.blob_len * 4 {
        return Err(Error::corrupt(
            path,
            format!(
                "weight blob has {} bytes, header declares {}",
                payload.len(),
                env.blob_len * 4
            ),
        ));
    }
    let blob = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((env.header, blob))
}

pub fn read_checkpoint<H: DeserializeOwned>(path: &Path, kind: &str) -> Result<(H, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes, kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let blob = vec![1.5f32, -2.0, 3.25];
        write_checkpoint(&p, "test", &serde_json::json!({"f": 2}), &blob).unwrap();
        let (h, b): (serde_json::Value, Vec<f32>) = read_checkpoint(&p, "test").unwrap();
        assert_eq!(h["f"], 2);
        assert_eq!(b, blob);
        assert!(matches!(
            read_checkpoint::<serde_json::Value>(&p, "other"),
            Err(Error::Corrupt { .. })
        ));
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            read_checkpoint::<serde_json::Value>(&p, "test"),
            Err(Error::Corrupt { .. })
        ));
    }
}
