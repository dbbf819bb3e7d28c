//! Self-describing binary container for named `f64` matrices plus JSON
//! metadata. Used for model checkpoints and generated datasets.
//!
//! Layout: `PIMACKPT` magic, format version (u32 LE), header length
//! (u64 LE), JSON header, little-endian tensor payload, then a SHA-256 of
//! everything before it.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PIMACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    /// Free-form content tag such as `"train_state"` or `"dataset"`.
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, metadata: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Array2<f64>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: [t.nrows(), t.ncols()],
                    dtype: "f64".into(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses and verifies a container. `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: origin.to_string(),
            reason: reason.to_string(),
        };
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic or truncated header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| corrupt(&format!("bad header: {e}")))?;
        let mut offset = header_end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            if entry.dtype != "f64" {
                return Err(corrupt(&format!("unsupported dtype {}", entry.dtype)));
            }
            let count = entry.shape[0]
                .checked_mul(entry.shape[1])
                .ok_or_else(|| corrupt("tensor shape overflows"))?;
            let end = offset
                .checked_add(count * 8)
                .filter(|&e| e <= body.len())
                .ok_or_else(|| corrupt(&format!("payload for {} is truncated", entry.name)))?;
            let values: Vec<f64> = body[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Array2::from_shape_vec((entry.shape[0], entry.shape[1]), values)
                .map_err(|_| corrupt("tensor shape"))?;
            tensors.push((entry.name, t));
            offset = end;
        }
        if offset != body.len() {
            return Err(corrupt("trailing bytes after payload"));
        }
        Ok(Self {
            kind: header.kind,
            metadata: header.metadata,
            tensors,
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// failed write never leaves a partial container at `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> Container {
        let mut c = Container::new("test", serde_json::json!({"epoch": 3}));
        c.push("a", array![[1.0, -2.5], [f64::MIN_POSITIVE, 1e300]]);
        c.push("b", Array2::zeros((0, 4)));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes().unwrap(), "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("b").unwrap().dim(), (0, 4));
        assert!(matches!(back.get("zzz"), Err(Error::MissingTensor(_))));
    }

    #[test]
    fn truncation_and_bit_flips_are_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 7, 30, bytes.len() - 1] {
            assert!(matches!(
                Container::from_bytes(&bytes[..cut], "mem"),
                Err(Error::Corrupt { .. })
            ));
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() - 40] ^= 1;
        assert!(matches!(
            Container::from_bytes(&flipped, "mem"),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(
            Container::from_bytes(&bytes, "mem"),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        sample().save(&p).unwrap();
        assert_eq!(Container::load(&p).unwrap(), sample());
        assert!(Container::load(dir.path().join("missing")).is_err());
    }
}
