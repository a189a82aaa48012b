//! Named-tensor archives: a one-line JSON manifest, a newline, then the
//! concatenated little-endian `f64` payloads.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DopError, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "dop-archive-v1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    byte_offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config_hash: String,
    tokens: Vec<String>,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub config_hash: String,
    /// Token list stored alongside the tensors (the domain-word sequence
    /// for prefix checkpoints).
    pub tokens: Vec<String>,
    pub tensors: Vec<(String, Tensor)>,
}

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex_digest(&bytes)
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Archive {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| DopError::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    byte_offset: offset,
                };
                offset += t.numel() * 8;
                e
            })
            .collect();
        let manifest = Manifest {
            format: FORMAT.into(),
            config_hash: self.config_hash.clone(),
            tokens: self.tokens.clone(),
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
        out.push(b'\n');
        for (_, t) in &self.tensors {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses an archive and checks its config hash against `expected_hash`
    /// when one is given.
    pub fn from_bytes(bytes: &[u8], expected_hash: Option<&str>) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| DopError::Checkpoint("missing manifest terminator".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..split])
            .map_err(|e| DopError::Checkpoint(format!("bad manifest: {e}")))?;
        if manifest.format != FORMAT {
            return Err(DopError::Checkpoint(format!("unknown format {}", manifest.format)));
        }
        if let Some(h) = expected_hash {
            if h != manifest.config_hash {
                return Err(DopError::Checkpoint(format!(
                    "config hash mismatch: archive {}, expected {h}",
                    manifest.config_hash
                )));
            }
        }
        let payload = &bytes[split + 1..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected_offset = 0;
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.byte_offset != expected_offset || e.byte_offset + n * 8 > payload.len() {
                return Err(DopError::Checkpoint(format!("tensor {} lies outside the payload", e.name)));
            }
            let values = payload[e.byte_offset..e.byte_offset + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            expected_offset += n * 8;
            tensors.push((e.name, Tensor::new(e.shape, values)?));
        }
        if expected_offset != payload.len() {
            return Err(DopError::Checkpoint("trailing bytes after the last tensor".into()));
        }
        Ok(Self {
            config_hash: manifest.config_hash,
            tokens: manifest.tokens,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| DopError::io(path, e))
    }

    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DopError::io(path, e))?;
        Self::from_bytes(&bytes, expected_hash)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        Archive {
            config_hash: config_hash(&("cfg", 1)),
            tokens: vec!["menu".into(), "chef".into()],
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 2], vec![1.0, -2.5, 1e-300, 3.0]).unwrap()),
                ("b".into(), Tensor::new(vec![3], vec![0.1, 0.2, f64::MIN_POSITIVE]).unwrap()),
                ("empty".into(), Tensor::zeros(vec![0, 4])),
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let a = sample();
        let bytes = a.to_bytes();
        let back = Archive::from_bytes(&bytes, Some(&a.config_hash)).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn manifest_layout() {
        let bytes = sample().to_bytes();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let m: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(m["tensors"][1]["byte_offset"], 32);
        assert_eq!(m["tensors"][1]["shape"], serde_json::json!([3]));
        assert_eq!(bytes.len() - nl - 1, 7 * 8);
        assert_eq!(&bytes[nl + 1..nl + 9], &1.0f64.to_le_bytes());
    }

    #[test]
    fn hash_and_corruption_checks() {
        let a = sample();
        let bytes = a.to_bytes();
        assert!(matches!(
            Archive::from_bytes(&bytes, Some("other")),
            Err(DopError::Checkpoint(_))
        ));
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1], None).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Archive::from_bytes(&extra, None).is_err());
        assert!(Archive::from_bytes(b"{}", None).is_err());
    }
}
