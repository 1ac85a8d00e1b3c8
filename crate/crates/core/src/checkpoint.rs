//! Flat binary container of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SPCK" | u32 version | u64 manifest_len | manifest (UTF-8 JSON) | tensor data
//! ```
//!
//! The manifest lists every tensor's name, shape and byte offset into the
//! data section, plus dtype, seed and epoch. Elements are stored row-major
//! as little-endian IEEE-754 values of the manifest dtype.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, ParseError, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub seed: u64,
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub seed: u64,
    pub epoch: usize,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let width = std::mem::size_of::<T>() as u64;
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len() as u64 * width;
        }
        let manifest = serde_json::to_vec(&Manifest {
            dtype: T::DTYPE.to_string(),
            seed: self.seed,
            epoch: self.epoch,
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let parse = |kind| Error::Parse {
            path: path.into(),
            kind,
        };
        if bytes.len() < 16 {
            return Err(parse(ParseError::Truncated {
                needed: 16,
                have: bytes.len(),
            }));
        }
        if &bytes[..4] != MAGIC {
            return Err(parse(ParseError::BadMagic {
                found: u32::from_be_bytes(bytes[..4].try_into().unwrap()),
                expected: u32::from_be_bytes(*MAGIC),
            }));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(parse(ParseError::Malformed(format!(
                "unsupported checkpoint version {version}"
            ))));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize.saturating_add(mlen);
        if bytes.len() < data_start {
            return Err(parse(ParseError::Truncated {
                needed: data_start,
                have: bytes.len(),
            }));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| parse(ParseError::Malformed(format!("manifest: {e}"))))?;
        if manifest.dtype != T::DTYPE {
            return Err(parse(ParseError::Malformed(format!(
                "dtype {} where {} was requested",
                manifest.dtype,
                T::DTYPE
            ))));
        }
        let width = std::mem::size_of::<T>();
        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + count * width;
            if end > data.len() {
                return Err(parse(ParseError::Truncated {
                    needed: data_start + end,
                    have: bytes.len(),
                }));
            }
            let vals = data[start..end]
                .chunks_exact(width)
                .map(T::read_le)
                .collect();
            tensors.push((e.name, Tensor::new(&e.shape, vals)?));
        }
        Ok(Self {
            seed: manifest.seed,
            epoch: manifest.epoch,
            tensors,
        })
    }

    /// Writes the checkpoint and returns its content hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(content_hash(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Hex SHA-256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
