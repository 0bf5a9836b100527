//! Single-file named-parameter checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then
//! the concatenated f32le parameter payloads. Offsets in the header are byte
//! offsets into the payload section.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    params: BTreeMap<String, ParamEntry>,
    config: serde_json::Value,
    stage: String,
    seed: u64,
    #[serde(default)]
    history: Vec<String>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A named tensor with its values flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(NamedTensor {
            shape: t.dims().to_vec(),
            data: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape.as_slice(), device)?.to_dtype(dtype)?)
    }
}

/// Parameters plus the configuration and training provenance that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub params: BTreeMap<String, NamedTensor>,
    pub config: serde_json::Value,
    /// Stage that produced the parameters ("init", "A2D", "V3D", "FUSION").
    pub stage: String,
    pub seed: u64,
    /// Earlier stages this bundle descends from, oldest first.
    pub history: Vec<String>,
    /// Free-form training summary (best epoch, validation metric, gate value).
    pub meta: serde_json::Value,
}

impl ModelBundle {
    pub fn from_store(
        store: &ParamStore,
        config: serde_json::Value,
        stage: &str,
        seed: u64,
    ) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (name, var) in store.named_vars() {
            params.insert(name, NamedTensor::from_tensor(var.as_tensor())?);
        }
        Ok(ModelBundle {
            params,
            config,
            stage: stage.to_string(),
            seed,
            history: Vec::new(),
            meta: serde_json::Value::Null,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.params {
            entries.insert(
                name.clone(),
                ParamEntry {
                    shape: t.shape.clone(),
                    dtype: "f32le".into(),
                    offset,
                },
            );
            offset += 4 * t.data.len() as u64;
        }
        let header = Header {
            params: entries,
            config: self.config.clone(),
            stage: self.stage.clone(),
            seed: self.seed,
            history: self.history.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Checkpoint("file shorter than its length prefix".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| Error::Checkpoint(format!("header length {hlen} exceeds file")))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[8 + hlen..];
        let mut params = BTreeMap::new();
        for (name, e) in header.params {
            if e.dtype != "f32le" {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype {}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = payload.get(start..start + 4 * n).ok_or_else(|| {
                Error::Checkpoint(format!("{name}: payload range out of bounds"))
            })?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(name, NamedTensor { shape: e.shape, data });
        }
        Ok(ModelBundle {
            params,
            config: header.config,
            stage: header.stage,
            seed: header.seed,
            history: header.history,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Keeps only parameters whose name satisfies `pred`.
    pub fn filtered(&self, pred: impl Fn(&str) -> bool) -> Self {
        ModelBundle {
            params: self
                .params
                .iter()
                .filter(|(k, _)| pred(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            ..self.clone()
        }
    }
}

pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
