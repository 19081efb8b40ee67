//! Versioned checkpoint files: every parameter as a safetensors entry plus a
//! single JSON metadata record.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

/// Metadata key holding the JSON header. A single key keeps the serialised
/// bytes independent of hash map iteration order.
const META_KEY: &str = "dpiqa";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    /// Architecture snapshot; its schema depends on `kind`.
    pub config: serde_json::Value,
    pub dataset_id: String,
    pub split_seed: u64,
    pub repeat_index: usize,
    /// Free-form extras such as the best validation step.
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_store(meta: CheckpointMeta, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            meta,
            tensors: store.snapshot()?.into_iter().collect(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&self.meta)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let mut info = HashMap::new();
        info.insert(META_KEY.to_string(), header);
        let ordered: BTreeMap<&String, &Tensor> = self.tensors.iter().collect();
        safetensors::serialize(ordered, Some(info))
            .map_err(|e| Error::Checkpoint(format!("serialise: {e}")))
    }

    /// Parses and validates a checkpoint. Never panics on malformed input.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = safetensors::SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("missing checkpoint metadata".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let st = safetensors::SafeTensors::deserialize(bytes)
            .map_err(|e| Error::Checkpoint(format!("tensors: {e}")))?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            let t = Tensor::from_raw_buffer(
                view.data(),
                convert_dtype(view.dtype())?,
                view.shape(),
                &Device::Cpu,
            )
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.insert(name, t);
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(content_hash(&bytes))
    }

    /// Loads a checkpoint and the hash of its bytes.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let hash = content_hash(&bytes);
        Ok((Self::from_bytes(&bytes)?, hash))
    }

    /// A strict store over these tensors: every requested parameter must be
    /// present with the right shape.
    pub fn into_store(self, dtype: candle_core::DType) -> ParamStore {
        ParamStore::from_tensors(self.tensors, 0, dtype, true)
    }
}

fn convert_dtype(d: safetensors::Dtype) -> Result<candle_core::DType> {
    use candle_core::DType;
    match d {
        safetensors::Dtype::F32 => Ok(DType::F32),
        safetensors::Dtype::F64 => Ok(DType::F64),
        safetensors::Dtype::F16 => Ok(DType::F16),
        safetensors::Dtype::BF16 => Ok(DType::BF16),
        other => Err(Error::Checkpoint(format!(
            "unsupported tensor dtype {other:?}"
        ))),
    }
}

/// Lowercase hex SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Errors if any supplied tensor was not consumed by the model.
pub(crate) fn ensure_all_used(store: &ParamStore) -> Result<()> {
    let unused = store.unused_tensors();
    if unused.is_empty() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!(
            "checkpoint has {} unexpected parameter(s), first: {}",
            unused.len(),
            unused[0]
        )))
    }
}
