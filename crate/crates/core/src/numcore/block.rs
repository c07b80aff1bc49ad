use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::{Group, ParamId, Slot};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BlockKind {
    /// `x · W + b`
    Dense,
    Relu,
    /// Row-wise softmax producing a probability vector.
    SoftmaxOutput,
    Identity,
    /// Averages groups of `window` consecutive features.
    AvgPool { window: usize },
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Dense => "dense",
            BlockKind::Relu => "relu",
            BlockKind::SoftmaxOutput => "softmax_output",
            BlockKind::Identity => "identity",
            BlockKind::AvgPool { .. } => "avg_pool",
        }
    }

    /// Multiply-accumulate count per input row: `in·out` for dense, `out` for
    /// elementwise and normalizing kinds, `in` for pooling, zero for identity.
    pub fn macs(self, in_dim: usize, out_dim: usize) -> u64 {
        match self {
            BlockKind::Dense => (in_dim * out_dim) as u64,
            BlockKind::Relu | BlockKind::SoftmaxOutput => out_dim as u64,
            BlockKind::AvgPool { .. } => in_dim as u64,
            BlockKind::Identity => 0,
        }
    }
}

/// A single layer. Parameter-free kinds carry an empty parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    kind: BlockKind,
    in_dim: usize,
    out_dim: usize,
    params: Vec<(Slot, Tensor)>,
}

impl Block {
    /// Dense block with uniform `±sqrt(6 / (in + out))` weights and zero bias.
    pub fn dense<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self::dense_from(
            Tensor::new(vec![in_dim, out_dim], w).expect("shape"),
            Tensor::zeros(vec![out_dim]),
        )
        .expect("consistent dense shapes")
    }

    /// Square dense block initialized to `I + U(-noise, noise)`.
    pub fn dense_near_identity<R: Rng + ?Sized>(dim: usize, noise: f64, rng: &mut R) -> Self {
        let mut w = vec![0.0; dim * dim];
        for (k, v) in w.iter_mut().enumerate() {
            let diag = if k / dim == k % dim { 1.0 } else { 0.0 };
            *v = diag
                + if noise > 0.0 {
                    rng.random_range(-noise..noise)
                } else {
                    0.0
                };
        }
        Self::dense_from(
            Tensor::new(vec![dim, dim], w).expect("shape"),
            Tensor::zeros(vec![dim]),
        )
        .expect("consistent dense shapes")
    }

    pub fn dense_from(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (in_dim, out_dim) = match weight.shape() {
            [i, o] => (*i, *o),
            s => return Err(Error::dim("dense weight", "[in, out]", format!("{s:?}"))),
        };
        if bias.shape() != [out_dim] {
            return Err(Error::dim(
                "dense bias",
                format!("[{out_dim}]"),
                format!("{:?}", bias.shape()),
            ));
        }
        Ok(Self {
            kind: BlockKind::Dense,
            in_dim,
            out_dim,
            params: vec![(Slot::Weight, weight), (Slot::Bias, bias)],
        })
    }

    fn parameter_free(kind: BlockKind, in_dim: usize, out_dim: usize) -> Self {
        Self {
            kind,
            in_dim,
            out_dim,
            params: Vec::new(),
        }
    }

    pub fn relu(dim: usize) -> Self {
        Self::parameter_free(BlockKind::Relu, dim, dim)
    }

    pub fn softmax_output(dim: usize) -> Self {
        Self::parameter_free(BlockKind::SoftmaxOutput, dim, dim)
    }

    pub fn identity(dim: usize) -> Self {
        Self::parameter_free(BlockKind::Identity, dim, dim)
    }

    pub fn avg_pool(in_dim: usize, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("pool window must be positive".into()));
        }
        Ok(Self::parameter_free(
            BlockKind::AvgPool { window },
            in_dim,
            in_dim.div_ceil(window),
        ))
    }

    /// Rebuilds a block of `kind` from stored parameters (checkpoint loading).
    pub fn from_parts(kind: BlockKind, in_dim: usize, out_dim: usize, params: Vec<(Slot, Tensor)>) -> Result<Self> {
        let block = match kind {
            BlockKind::Dense => {
                let mut w = None;
                let mut b = None;
                for (slot, t) in params {
                    match slot {
                        Slot::Weight => w = Some(t),
                        Slot::Bias => b = Some(t),
                    }
                }
                let (Some(w), Some(b)) = (w, b) else {
                    return Err(Error::Checkpoint("dense block needs weight and bias".into()));
                };
                Self::dense_from(w, b)?
            }
            BlockKind::AvgPool { window } => Self::avg_pool(in_dim, window)?,
            BlockKind::Relu | BlockKind::SoftmaxOutput | BlockKind::Identity => {
                if !params.is_empty() {
                    return Err(Error::Checkpoint(format!(
                        "{} block takes no parameters",
                        kind.name()
                    )));
                }
                Self::parameter_free(kind, in_dim, in_dim)
            }
        };
        if block.in_dim != in_dim || block.out_dim != out_dim {
            return Err(Error::dim(
                format!("{} block", kind.name()),
                format!("{in_dim}->{out_dim}"),
                format!("{}->{}", block.in_dim, block.out_dim),
            ));
        }
        Ok(block)
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn params(&self) -> &[(Slot, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(Slot, Tensor)] {
        &mut self.params
    }

    pub fn param(&self, slot: Slot) -> Option<&Tensor> {
        self.params.iter().find(|(s, _)| *s == slot).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, slot: Slot) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(s, _)| *s == slot).map(|(_, t)| t)
    }

    /// Multiply-accumulate count for one input row.
    pub fn macs(&self) -> u64 {
        self.kind.macs(self.in_dim, self.out_dim)
    }

    fn describe(&self) -> String {
        format!("{} {}->{}", self.kind.name(), self.in_dim, self.out_dim)
    }
}

/// Records `block` applied to `input` on the tape. Parameters are registered
/// under `(group, index)`; pass `frozen = true` to treat them as constants.
pub fn forward_block(
    graph: &mut Graph,
    block: &Block,
    input: Var,
    group: Group,
    index: usize,
    frozen: bool,
) -> Result<Var> {
    let got = graph.value(input).last_dim();
    if got != block.in_dim {
        return Err(Error::dim(
            format!("{group:?} block {index} ({})", block.describe()),
            format!("input width {}", block.in_dim),
            got,
        ));
    }
    match block.kind {
        BlockKind::Dense => {
            let mut reg = |slot: Slot| {
                let t = block.param(slot).expect("dense block has weight and bias");
                if frozen {
                    graph.constant(t.clone())
                } else {
                    graph.param(ParamId::new(group, index, slot), t)
                }
            };
            let w = reg(Slot::Weight);
            let b = reg(Slot::Bias);
            let z = graph.matmul(input, w)?;
            graph.add_bias(z, b)
        }
        BlockKind::Relu => Ok(graph.relu(input)),
        BlockKind::SoftmaxOutput => graph.softmax(input),
        BlockKind::Identity => Ok(input),
        BlockKind::AvgPool { window } => graph.avg_pool(input, window),
    }
}

impl Block {
    /// Value-only application on a `[n, in_dim]` batch.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.as_matrix());
        let y = forward_block(&mut g, self, x, Group::Stage(0), 0, true)?;
        Ok(g.value(y).clone())
    }
}
