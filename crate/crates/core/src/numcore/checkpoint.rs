//! Versioned text checkpoints.
//!
//! The document is JSON: a header (`format`, `schema_version`), a block list
//! with kinds and dimensions, and array payloads stored as base64 of
//! little-endian `f64` bytes. Decoding reproduces every bit of every value.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::block::{Block, BlockKind};
use super::tensor::Tensor;
use super::Slot;
use crate::{Error, Result};

pub const FORMAT: &str = "multiexit-checkpoint";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl EncodedTensor {
    pub fn encode(t: &Tensor) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            shape: t.shape().to_vec(),
            data: B64.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(format!("bad base64 payload: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Checkpoint("payload is not a whole number of f64s".into()));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    #[serde(flatten)]
    pub kind: BlockKind,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<(Slot, EncodedTensor)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub schema_version: u32,
    pub blocks: Vec<BlockEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tensors: Vec<(String, EncodedTensor)>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            format: FORMAT.into(),
            schema_version: SCHEMA_VERSION,
            blocks: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl Checkpoint {
    pub fn push_block(&mut self, name: impl Into<String>, block: &Block) {
        self.blocks.push(BlockEntry {
            name: name.into(),
            kind: block.kind(),
            in_dim: block.in_dim(),
            out_dim: block.out_dim(),
            params: block
                .params()
                .iter()
                .map(|(s, t)| (*s, EncodedTensor::encode(t)))
                .collect(),
        });
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), EncodedTensor::encode(t)));
    }

    pub fn block(&self, name: &str) -> Result<Block> {
        let e = self
            .blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing block {name}")))?;
        let params = e
            .params
            .iter()
            .map(|(s, t)| Ok((*s, t.decode()?)))
            .collect::<Result<Vec<_>>>()?;
        Block::from_parts(e.kind, e.in_dim, e.out_dim, params)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?
            .1
            .decode()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.schema_version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported schema version {}",
                ck.schema_version
            )));
        }
        Ok(ck)
    }
}
