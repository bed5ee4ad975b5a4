//! The `LFCK` parameter container.
//!
//! ```text
//! "LFCK"  u32 version  u64 meta_len  meta JSON
//! u32 count  count × (u32 name_len, name, 5 × u64 dims, u64 offset, u64 len)
//! tensor blobs, little-endian f32, at the recorded absolute offsets
//! ```
//!
//! All integers are little-endian. Encoding is canonical, so
//! `save(load(save(x))) == save(x)`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zoomseg_core::resunet::{build_model, ArchConfig, Model, ModelError};
use zoomseg_core::tensor::Tensor;
use zoomseg_core::train::{EpochRecord, StageName, TrainConfig};

pub const MAGIC: &[u8; 4] = b"LFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("tensor {name} lies outside the file")]
    OffsetOutOfBounds { name: String },
    #[error("tensor {0} listed twice")]
    DuplicateName(String),
    #[error("tensor {name}: shape {shape:?} needs {expected} bytes, index says {got}")]
    LengthMismatch { name: String, shape: [usize; 5], expected: usize, got: usize },
    #[error("history digest does not match the stored history")]
    DigestMismatch,
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Everything stored next to the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Report name of the model, e.g. `3D-ResU-Net-F`.
    pub system: String,
    pub arch: ArchConfig,
    pub stage: Option<StageName>,
    pub epoch: u64,
    pub seed: u64,
    pub train_config: Option<TrainConfig>,
    pub history: Vec<EpochRecord>,
    /// Hex SHA-256 of the compact JSON encoding of `history`.
    pub history_sha256: String,
}

pub fn history_digest(history: &[EpochRecord]) -> String {
    let json = serde_json::to_vec(history).expect("history serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor<f32>)>,
}

pub struct ModelInfo<'a> {
    pub system: &'a str,
    pub stage: Option<StageName>,
    pub epoch: u64,
    pub seed: u64,
    pub train_config: Option<&'a TrainConfig>,
    pub history: &'a [EpochRecord],
}

impl Checkpoint {
    pub fn from_params(arch: &ArchConfig, params: Vec<(String, Tensor<f32>)>, info: ModelInfo<'_>) -> Self {
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            system: info.system.into(),
            arch: arch.clone(),
            stage: info.stage,
            epoch: info.epoch,
            seed: info.seed,
            train_config: info.train_config.cloned(),
            history: info.history.to_vec(),
            history_sha256: history_digest(info.history),
        };
        Self { meta, params }
    }

    pub fn from_model(model: &Model<f32>, info: ModelInfo<'_>) -> Self {
        let params = model.named_params().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Self::from_params(model.config(), params, info)
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let skeleton = build_model::<f32>(&self.meta.arch, 0)?;
        Ok(skeleton.with_params(self.params.clone())?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let index_len: usize = self.params.iter().map(|(n, _)| 4 + n.len() + 7 * 8).sum();
        let mut offset = (4 + 4 + 8 + meta.len() + 4 + index_len) as u64;
        let mut out = Vec::with_capacity(offset as usize + self.params.iter().map(|(_, t)| 4 * t.numel()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let len = 4 * t.numel() as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
            offset += len;
        }
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, at: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        if meta.history_sha256 != history_digest(&meta.history) {
            return Err(CheckpointError::DigestMismatch);
        }
        let count = r.u32()? as usize;
        let mut seen = HashSet::new();
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
            let mut shape = [0usize; 5];
            for d in &mut shape {
                *d = r.u64()? as usize;
            }
            let (offset, len) = (r.u64()? as usize, r.u64()? as usize);
            if !seen.insert(name.clone()) {
                return Err(CheckpointError::DuplicateName(name));
            }
            let expected = shape.iter().try_fold(4usize, |acc, &d| acc.checked_mul(d)).unwrap_or(usize::MAX);
            if expected != len {
                return Err(CheckpointError::LengthMismatch { name, shape, expected, got: len });
            }
            let blob = offset
                .checked_add(len)
                .and_then(|end| bytes.get(offset..end))
                .ok_or_else(|| CheckpointError::OffsetOutOfBounds { name: name.clone() })?;
            let data = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.push((name, Tensor::from_vec(shape, data).expect("length checked")));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.at.checked_add(n).and_then(|end| self.b.get(self.at..end)).ok_or(CheckpointError::Truncated(self.at))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
