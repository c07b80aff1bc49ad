//! Model description documents and their pairing with weight checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AuxiliaryHead, CombinationMode, Combiner, ExitGate, MultiExitNetwork, Stage};
use crate::numcore::checkpoint::Checkpoint;
use crate::numcore::{Block, BlockKind};
use crate::{Error, Result};

pub const MODEL_FORMAT: &str = "multiexit-model";
pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDesc {
    #[serde(flatten)]
    pub kind: BlockKind,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl From<&Block> for BlockDesc {
    fn from(b: &Block) -> Self {
        Self {
            kind: b.kind(),
            in_dim: b.in_dim(),
            out_dim: b.out_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitDesc {
    pub attach: usize,
    pub head: Vec<BlockDesc>,
    #[serde(default)]
    pub gate: bool,
}

/// Architecture document; weights live in the referenced checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescription {
    pub format: String,
    pub schema_version: u32,
    pub input_dim: usize,
    pub classes: usize,
    pub stages: Vec<Vec<BlockDesc>>,
    pub exits: Vec<ExitDesc>,
    #[serde(default)]
    pub combiner: Option<CombinationMode>,
    /// Checkpoint path, relative to the description file.
    pub checkpoint: String,
}

fn stage_name(d: usize, b: usize) -> String {
    format!("stage{d}/{b}")
}

fn head_name(d: usize, b: usize) -> String {
    format!("head{d}/{b}")
}

fn gate_name(d: usize) -> String {
    format!("gate{d}")
}

impl MultiExitNetwork {
    pub fn describe(&self, checkpoint: impl Into<String>) -> ModelDescription {
        ModelDescription {
            format: MODEL_FORMAT.into(),
            schema_version: MODEL_SCHEMA_VERSION,
            input_dim: self.input_dim,
            classes: self.classes,
            stages: self
                .backbone
                .iter()
                .map(|s| s.blocks.iter().map(BlockDesc::from).collect())
                .collect(),
            exits: self
                .heads
                .iter()
                .map(|h| ExitDesc {
                    attach: h.attach,
                    head: h.blocks.iter().map(BlockDesc::from).collect(),
                    gate: self.has_gates(),
                })
                .collect(),
            combiner: self.combiner.as_ref().map(Combiner::mode),
            checkpoint: checkpoint.into(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (i, s) in self.backbone.iter().enumerate() {
            for (b, block) in s.blocks.iter().enumerate() {
                ck.push_block(stage_name(i + 1, b), block);
            }
        }
        for h in &self.heads {
            for (b, block) in h.blocks.iter().enumerate() {
                ck.push_block(head_name(h.attach, b), block);
            }
        }
        for g in &self.gates {
            ck.push_block(gate_name(g.attach), &g.dense);
        }
        if let Some(c) = &self.combiner {
            ck.push_tensor("combiner", &c.raw);
        }
        ck
    }

    pub fn from_description(desc: &ModelDescription, ck: &Checkpoint) -> Result<Self> {
        if desc.format != MODEL_FORMAT || desc.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported model document {} v{}",
                desc.format, desc.schema_version
            )));
        }
        let load = |name: String, d: &BlockDesc| -> Result<Block> {
            let b = ck.block(&name)?;
            if BlockDesc::from(&b) != *d {
                return Err(Error::Checkpoint(format!(
                    "block {name} does not match the description"
                )));
            }
            Ok(b)
        };
        let mut stages = Vec::with_capacity(desc.stages.len());
        for (i, s) in desc.stages.iter().enumerate() {
            let blocks = s
                .iter()
                .enumerate()
                .map(|(b, d)| load(stage_name(i + 1, b), d))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage::new(blocks)?);
        }
        let mut heads = Vec::new();
        let mut gates = Vec::new();
        for e in &desc.exits {
            let blocks = e
                .head
                .iter()
                .enumerate()
                .map(|(b, d)| load(head_name(e.attach, b), d))
                .collect::<Result<Vec<_>>>()?;
            heads.push(AuxiliaryHead::from_blocks(e.attach, blocks)?);
            if e.gate {
                gates.push(ExitGate::from_block(e.attach, ck.block(&gate_name(e.attach))?)?);
            }
        }
        let combiner = match desc.combiner {
            Some(mode) => Some(Combiner::new(mode, ck.tensor("combiner")?.into_data())?),
            None => None,
        };
        let net = MultiExitNetwork::from_parts(stages, heads, gates, combiner)?;
        if net.input_dim != desc.input_dim || net.classes != desc.classes {
            return Err(Error::Checkpoint("input/class counts disagree with the description".into()));
        }
        Ok(net)
    }

    /// Writes `<path>` (description) and `<stem>.weights.json` next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("model");
        let ck_name = format!("{stem}.weights.json");
        let ck_path = path.with_file_name(&ck_name);
        std::fs::write(&ck_path, self.to_checkpoint().to_json()?)?;
        std::fs::write(path, serde_json::to_string_pretty(&self.describe(ck_name))?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let desc: ModelDescription = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let ck_path = path.with_file_name(&desc.checkpoint);
        let ck = Checkpoint::from_json(&std::fs::read_to_string(ck_path)?)?;
        Self::from_description(&desc, &ck)
    }
}
