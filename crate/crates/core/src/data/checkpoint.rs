//! Versioned checkpoint container.
//!
//! ```text
//! b"DPVAECK1" | u64 LE header length | JSON header | f64 LE payload
//! ```
//!
//! The header holds `format_version`, a config echo, free-form metadata and
//! a manifest of `{name, shape, offset, len, crc32}` entries. Offsets and
//! lengths count `f64` values, not bytes. Tensors are stored back to back in
//! manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DPVAECK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u64, supported: u32 },
    #[error("checkpoint truncated: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("manifest describes {manifest} payload bytes but file holds {payload}")]
    PayloadLength { manifest: u64, payload: u64 },
    #[error("tensor {name}: shape {shape:?} does not match length {len}")]
    ShapeMismatch { name: String, shape: Vec<usize>, len: u64 },
    #[error("tensor {name}: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { name: String, stored: u32, computed: u32 },
    #[error("checkpoint has no tensor named {0}")]
    Missing(String),
    #[error("duplicate tensor name {0}")]
    Duplicate(String),
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
    crc32: u32,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u64,
    config: Value,
    meta: Value,
    tensors: Vec<ManifestEntry>,
}

/// In-memory checkpoint: a config echo, metadata, and named tensors in
/// insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Value,
    pub meta: Value,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config: Value, meta: Value) -> Self {
        Checkpoint {
            config,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), CheckpointError> {
        let name = name.into();
        if self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(CheckpointError::Duplicate(name));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let mut payload = Vec::new();
        let mut manifest = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let start = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len() as u64,
                crc32: crc32fast::hash(&payload[start..]),
            });
            offset += t.len() as u64;
        }
        let header = Header {
            format_version: u64::from(FORMAT_VERSION),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: manifest,
        };
        let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    /// Validates magic, version and manifest before touching the payload,
    /// then checks every tensor's CRC.
    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let available = bytes.len() as u64;
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated { needed: 16, available });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = header_len.checked_add(16).ok_or(CheckpointError::Truncated {
            needed: u64::MAX,
            available,
        })?;
        if header_end > available {
            return Err(CheckpointError::Truncated {
                needed: header_end,
                available,
            });
        }
        let header_bytes = &bytes[16..header_end as usize];
        let raw: Value =
            serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let version = raw
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| CheckpointError::Header("missing format_version".into()))?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| CheckpointError::Header(e.to_string()))?;

        let mut expected_offset = 0u64;
        for e in &header.tensors {
            let cells = e.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
            if e.shape.is_empty() || e.shape.contains(&0) || cells != Some(e.len) {
                return Err(CheckpointError::ShapeMismatch {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    len: e.len,
                });
            }
            if e.offset != expected_offset {
                return Err(CheckpointError::Header(format!(
                    "tensor {} starts at {} but previous tensors end at {}",
                    e.name, e.offset, expected_offset
                )));
            }
            expected_offset = expected_offset
                .checked_add(e.len)
                .ok_or_else(|| CheckpointError::Header("manifest length overflow".into()))?;
        }
        let payload = &bytes[header_end as usize..];
        let manifest_bytes = expected_offset.saturating_mul(8);
        if manifest_bytes != payload.len() as u64 {
            return Err(CheckpointError::PayloadLength {
                manifest: manifest_bytes,
                payload: payload.len() as u64,
            });
        }

        let mut ck = Checkpoint::new(header.config, header.meta);
        for e in header.tensors {
            let start = (e.offset * 8) as usize;
            let chunk = &payload[start..start + (e.len * 8) as usize];
            let computed = crc32fast::hash(chunk);
            if computed != e.crc32 {
                return Err(CheckpointError::Crc {
                    name: e.name,
                    stored: e.crc32,
                    computed,
                });
            }
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            ck.push(e.name, Tensor::from_parts(e.shape, data))?;
        }
        Ok(ck)
    }

    /// Writes to a sibling temporary file and renames it into place, so an
    /// interrupted save never leaves a partial checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::decode(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(json!({"alpha": 2.0, "hidden_dim": 8}), json!({"sweep": 3}));
        ck.push("a", Tensor::from_rows(&[[1.0, -0.1], [f64::MIN_POSITIVE, 1e300]]).unwrap())
            .unwrap();
        ck.push("b", Tensor::vector(vec![0.1 + 0.2]).unwrap()).unwrap();
        ck
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        let bytes = sample().encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.encode(), bytes);
        let a = back.get("a").unwrap();
        assert_eq!(a.data()[2].to_bits(), f64::MIN_POSITIVE.to_bits());
    }

    #[test]
    fn corrupt_payload_fails_crc() {
        let mut bytes = sample().encode();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(CheckpointError::Crc { ref name, .. }) if name == "b"
        ));
    }

    fn with_header(edit: impl Fn(&mut Value)) -> Vec<u8> {
        let bytes = sample().encode();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        edit(&mut header);
        let h = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&bytes[16 + len..]);
        out
    }

    #[test]
    fn future_version_refused() {
        let bytes = with_header(|h| h["format_version"] = json!(2));
        assert_eq!(
            Checkpoint::decode(&bytes),
            Err(CheckpointError::UnsupportedVersion {
                found: 2,
                supported: FORMAT_VERSION
            })
        );
    }

    #[test]
    fn shape_and_length_errors_are_distinct() {
        let bytes = with_header(|h| h["tensors"][0]["shape"] = json!([3, 2]));
        assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::ShapeMismatch { .. })));

        let mut bytes = sample().encode();
        bytes.extend_from_slice(&[0; 8]);
        assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::PayloadLength { .. })));
        bytes.truncate(bytes.len() - 16);
        assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::PayloadLength { .. })));

        assert_eq!(Checkpoint::decode(b"NOTACKPT"), Err(CheckpointError::BadMagic));
        assert!(matches!(
            Checkpoint::decode(&sample().encode()[..20]),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn missing_and_duplicate_names() {
        let mut ck = sample();
        assert_eq!(ck.get("zz"), Err(CheckpointError::Missing("zz".into())));
        assert_eq!(
            ck.push("a", Tensor::scalar(0.0)),
            Err(CheckpointError::Duplicate("a".into()))
        );
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.ckpt");
        let p2 = dir.path().join("two.ckpt");
        sample().save(&p1).unwrap();
        Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
