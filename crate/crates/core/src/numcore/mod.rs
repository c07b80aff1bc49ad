//! Dense tensors, a reverse-mode tape, the block zoo and SGD.

mod block;
pub mod checkpoint;
mod graph;
mod optim;
mod tensor;

use serde::{Deserialize, Serialize};

pub use block::{forward_block, Block, BlockKind};
pub use graph::{softmax_row, Graph, Var, PROB_FLOOR};
pub use optim::{LrSchedule, SgdOptimizer};
pub use tensor::{argmax, Tensor};

use crate::{Error, Result};

/// Which part of a multi-exit network a parameter belongs to. Optimizer
/// learning rates are assigned per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// Backbone stage `f_i`, 1-based.
    Stage(usize),
    /// Auxiliary head attached after stage `i`.
    Head(usize),
    /// Exit gate attached after stage `i`.
    Gate(usize),
    /// Output-combination weights.
    Combiner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    Weight,
    Bias,
}

impl Slot {
    pub fn name(self) -> &'static str {
        match self {
            Slot::Weight => "weight",
            Slot::Bias => "bias",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub group: Group,
    pub block: usize,
    pub slot: Slot,
}

impl ParamId {
    pub fn new(group: Group, block: usize, slot: Slot) -> Self {
        Self { group, block, slot }
    }
}

/// `-ln(clamp(pred[target], 1e-12, 1))` for a single probability vector.
pub fn cross_entropy(pred: &[f64], target: usize) -> Result<f64> {
    if target >= pred.len() {
        return Err(Error::Index {
            what: "class",
            index: target,
            len: pred.len(),
        });
    }
    let total: f64 = pred.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "prediction must sum to 1, sums to {total}"
        )));
    }
    Ok(-pred[target].clamp(PROB_FLOOR, 1.0).ln())
}

/// Seeded generator used for every random draw in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
