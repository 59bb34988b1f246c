//! Checkpoint file: `"X2I1"`, u32 LE version, u64 LE header length, a UTF-8
//! JSON header, then raw little-endian arrays in manifest order.

use std::fs;
use std::path::Path;

use diffcore::{DType, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::trainer::config::RunConfig;

pub const MAGIC: &[u8; 4] = b"X2I1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: RunConfig,
    pub stage: String,
    pub step: u64,
    /// Seed the next batch would be drawn from.
    pub seed_state: u64,
    pub arrays: Vec<ArrayEntry>,
}

/// Trainable state of one run. Array names are prefixed by component
/// (`alignnet.`, `lightcontrol.`, `lora.`).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub stage: String,
    pub step: u64,
    pub seed_state: u64,
    pub arrays: ParamStore<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut payload = Vec::new();
        for (name, t) in self.arrays.iter() {
            let offset = payload.len() as u64;
            for &v in t.data() {
                v.write_le(&mut payload);
            }
            entries.push(ArrayEntry {
                name: name.to_string(),
                dtype: DType::F32.name().to_string(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let header = Header {
            config: self.config.clone(),
            stage: self.stage.clone(),
            step: self.step,
            seed_state: self.seed_state,
            arrays: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses a whole file image; nothing is returned unless every array is
    /// present and well-formed.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 {
            return Err(bad("file too short"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let payload = &bytes[body..];
        let mut arrays = ParamStore::new();
        let mut expected = 0u64;
        for e in &header.arrays {
            if e.dtype != DType::F32.name() {
                return Err(Error::Checkpoint(format!("array {} has unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.nbytes != (n * 4) as u64 {
                return Err(Error::Checkpoint(format!("array {} has an inconsistent manifest entry", e.name)));
            }
            let end = (e.offset + e.nbytes) as usize;
            if end > payload.len() {
                return Err(bad("truncated array data"));
            }
            let data = payload[e.offset as usize..end].chunks_exact(4).map(f32::read_le).collect();
            arrays.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            expected += e.nbytes;
        }
        if expected as usize != payload.len() {
            return Err(bad("trailing bytes after arrays"));
        }
        Ok(Checkpoint {
            config: header.config,
            stage: header.stage,
            step: header.step,
            seed_state: header.seed_state,
            arrays,
        })
    }

    /// Writes the file and returns its hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, &bytes)?;
        Ok(hash_bytes(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Hash of the serialized form; equal to the hash of the saved file.
    pub fn hash(&self) -> Result<String> {
        Ok(hash_bytes(&self.to_bytes()?))
    }

    /// Arrays under `prefix` with the prefix removed.
    pub fn component(&self, prefix: &str) -> ParamStore<f32> {
        self.arrays.strip_prefix(prefix)
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(hash_bytes(&fs::read(path)?))
}
