//! `SGC1` checkpoints.
//!
//! ```text
//! "SGC1" | u32 version (=1) | u32 json_len | JSON header
//! | u32 block count
//! per block: u32 name_len | name | u32 ndim | u32 × ndim dims | f64 × numel
//! ```
//!
//! The JSON header echoes the model config, data dimensions and chain
//! group order so a checkpoint is self-describing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{hex, put_string, put_u32, Cursor};
use crate::error::{Error, Result};
use crate::model::{DataDims, Model, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGC1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub dims: DataDims,
    #[serde(default)]
    pub chain_groups: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                config: model.config.clone(),
                dims: model.dims.clone(),
                chain_groups: model.chain_groups.clone(),
            },
            params: model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuilds the model and fills every parameter, requiring an exact
    /// match of names and shapes.
    pub fn into_model(self) -> Result<Model> {
        let h = self.header;
        let mut model = Model::skeleton(h.config, h.dims, h.chain_groups)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameter blocks, architecture needs {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, value) in self.params {
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter block {name:?}")))?;
            model
                .store
                .set(id, value)
                .map_err(|e| Error::Checkpoint(format!("parameter {name:?}: {e}")))?;
        }
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_string(&mut out, &serde_json::to_string(&self.header)?, "header length")?;
        put_u32(&mut out, self.params.len(), "block count")?;
        for (name, t) in &self.params {
            put_string(&mut out, name, "name length")?;
            put_u32(&mut out, t.shape().len(), "rank")?;
            for &d in t.shape() {
                put_u32(&mut out, d, "dimension")?;
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        c.magic(CHECKPOINT_MAGIC)?;
        let version = c.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let at = c.offset();
        let json = c.string("header")?;
        let header: CheckpointHeader =
            serde_json::from_str(&json).map_err(|e| Error::format(at, format!("bad header JSON: {e}")))?;
        let blocks = c.u32("block count")?;
        let mut params = Vec::new();
        for _ in 0..blocks {
            let name = c.string("parameter name")?;
            let rank = c.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| c.u32("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let at = c.offset();
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::format(at, format!("implausible shape {shape:?} for {name:?}")))?;
            let data = (0..numel)
                .map(|_| c.f64("parameter data"))
                .collect::<Result<Vec<_>>>()?;
            params.push((name, Tensor::new(shape, data)?));
        }
        c.finish()?;
        Ok(Checkpoint { header, params })
    }

    /// Short content hash of the encoded checkpoint.
    pub fn id(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.encode()?))[..16].to_string())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Checkpoint::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
