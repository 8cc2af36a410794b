//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic, a little-endian `u32` version, a `u64` header
//! length, a JSON header, the raw little-endian `f32` payload, and finally the
//! SHA-256 of everything before it. The header lists every tensor by
//! canonical parameter path and shape, in payload order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegmentationNet};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FSEGCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Where a training run stands; enough to continue it bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step: u64,
    pub epoch: usize,
    /// Sample order of the current epoch and how much of it is consumed.
    pub order: Vec<usize>,
    pub cursor: usize,
    pub rng: SeededRng,
}

impl Progress {
    pub fn new(seed: u64) -> Self {
        Self {
            step: 0,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
            rng: SeededRng::new(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub path: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    /// Free-form JSON snapshot of the training configuration.
    train: serde_json::Value,
    progress: Progress,
    params: Vec<TensorEntry>,
    has_moments: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: serde_json::Value,
    pub progress: Progress,
    pub params: Vec<(String, Tensor<f32>)>,
    /// AdamW first and second moments, aligned with `params` (empty when the
    /// checkpoint carries weights only).
    pub moments: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store(model: &ModelConfig, store: &ParamStore<f32>) -> Self {
        Self {
            model: model.clone(),
            train: serde_json::Value::Null,
            progress: Progress::new(0),
            params: store.iter().map(|(_, p)| (p.path.clone(), p.value.clone())).collect(),
            moments: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !self.moments.is_empty() && self.moments.len() != self.params.len() {
            return Err(Error::Checkpoint("moment count does not match parameter count".into()));
        }
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            progress: self.progress.clone(),
            params: self
                .params
                .iter()
                .map(|(path, t)| TensorEntry {
                    path: path.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            has_moments: !self.moments.is_empty(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = self
            .params
            .iter()
            .map(|(_, t)| t)
            .chain(self.moments.iter().map(|(m, _)| m))
            .chain(self.moments.iter().map(|(_, v)| v));
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let json = body.get(20..20 + header_len).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut payload = &body[20 + header_len..];
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            if payload.len() < 4 * n {
                return Err(corrupt("truncated payload"));
            }
            let (head, rest) = payload.split_at(4 * n);
            payload = rest;
            let data = head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::new(shape.to_vec(), data)
        };
        let mut params = Vec::with_capacity(header.params.len());
        for e in &header.params {
            params.push((e.path.clone(), take(&e.shape)?));
        }
        let mut moments = Vec::new();
        if header.has_moments {
            let m = header.params.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
            let v = header.params.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
            moments = m.into_iter().zip(v).collect();
        }
        if !payload.is_empty() {
            return Err(corrupt("trailing bytes after payload"));
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            progress: header.progress,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies the stored weights into `store`, which must have been built
    /// from `model`.
    pub fn restore_params(&self, model: &ModelConfig, store: &mut ParamStore<f32>) -> Result<()> {
        if &self.model != model {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds a {:?} model (input {}, embed {}), expected {:?} (input {}, embed {})",
                self.model.profile, self.model.input_size, self.model.embed_dim, model.profile, model.input_size, model.embed_dim
            )));
        }
        if self.params.len() != store.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (path, t) in &self.params {
            let id = store
                .id_of(path)
                .ok_or_else(|| Error::ConfigMismatch(format!("unknown parameter `{path}`")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "`{path}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            store.set_value(id, t.clone())?;
        }
        Ok(())
    }

    /// Builds the network described by the checkpoint and loads its weights.
    pub fn build_model(&self) -> Result<(SegmentationNet, ParamStore<f32>)> {
        let (net, mut store) = SegmentationNet::build::<f32>(&self.model, &mut SeededRng::new(0))?;
        self.restore_params(&self.model, &mut store)?;
        Ok((net, store))
    }

    /// SHA-256 over the serialized form.
    pub fn fingerprint(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_bytes()?).into())
    }
}
