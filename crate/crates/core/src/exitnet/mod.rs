//! Backbone stages with auxiliary heads attached at intermediate depths.
//!
//! Depths are 1-based: stage `i` is `f_i`, an exit attached at depth `i`
//! reads the embedding `h_i`, and depth `L` (the backbone length) is the
//! final classifier, which is always available.

mod gating;
mod persist;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numcore::{forward_block, Block, Graph, Group, ParamId, Tensor, Var};
use crate::{Error, Result};

pub use gating::{exit_probabilities, recursive_output, recursive_output_graph, soft_exit_probabilities_graph};
pub use persist::{BlockDesc, ExitDesc, ModelDescription};

/// One backbone position `f_i`: a short sequence of blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    blocks: Vec<Block>,
}

impl Stage {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Config("a stage needs at least one block".into()));
        }
        check_chain(&blocks, "stage")?;
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn in_dim(&self) -> usize {
        self.blocks[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.blocks[self.blocks.len() - 1].out_dim()
    }

    pub fn macs(&self) -> u64 {
        self.blocks.iter().map(Block::macs).sum()
    }
}

fn check_chain(blocks: &[Block], what: &str) -> Result<()> {
    for (i, pair) in blocks.windows(2).enumerate() {
        if pair[0].out_dim() != pair[1].in_dim() {
            return Err(Error::dim(
                format!("{what} block {}", i + 1),
                pair[0].out_dim(),
                pair[1].in_dim(),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    /// Hidden width of a two-layer head; `None` gives a single dense layer.
    #[serde(default)]
    pub hidden: Option<usize>,
    /// Average-pool the embedding with this window before classifying.
    #[serde(default)]
    pub pool_window: Option<usize>,
}

/// Auxiliary classifier `c_i`: blocks ending in a softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryHead {
    attach: usize,
    blocks: Vec<Block>,
}

impl AuxiliaryHead {
    pub fn build<R: Rng + ?Sized>(
        attach: usize,
        in_dim: usize,
        classes: usize,
        spec: &HeadSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut width = in_dim;
        if let Some(w) = spec.pool_window {
            let pool = Block::avg_pool(width, w)?;
            width = pool.out_dim();
            blocks.push(pool);
        }
        if let Some(h) = spec.hidden {
            if h == 0 {
                return Err(Error::Config("head hidden width must be positive".into()));
            }
            blocks.push(Block::dense(width, h, rng));
            blocks.push(Block::relu(h));
            width = h;
        }
        blocks.push(Block::dense(width, classes, rng));
        blocks.push(Block::softmax_output(classes));
        Self::from_blocks(attach, blocks)
    }

    pub fn from_blocks(attach: usize, blocks: Vec<Block>) -> Result<Self> {
        match blocks.last() {
            Some(b) if b.kind() == crate::numcore::BlockKind::SoftmaxOutput => {}
            _ => {
                return Err(Error::Config(format!(
                    "head at depth {attach} must end in a softmax output"
                )))
            }
        }
        check_chain(&blocks, "head")?;
        Ok(Self { attach, blocks })
    }

    pub fn attach(&self) -> usize {
        self.attach
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn in_dim(&self) -> usize {
        self.blocks[0].in_dim()
    }

    pub fn macs(&self) -> u64 {
        self.blocks.iter().map(Block::macs).sum()
    }
}

/// Learned exit gate: `sigmoid([logits, h] · w + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitGate {
    attach: usize,
    dense: Block,
}

impl ExitGate {
    pub fn build<R: Rng + ?Sized>(attach: usize, embed_dim: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            attach,
            dense: Block::dense(classes + embed_dim, 1, rng),
        }
    }

    pub fn from_block(attach: usize, dense: Block) -> Result<Self> {
        if dense.kind() != crate::numcore::BlockKind::Dense || dense.out_dim() != 1 {
            return Err(Error::Config("gate must be a dense block with one output".into()));
        }
        Ok(Self { attach, dense })
    }

    pub fn attach(&self) -> usize {
        self.attach
    }

    pub fn block(&self) -> &Block {
        &self.dense
    }

    pub fn macs(&self) -> u64 {
        self.dense.macs() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationMode {
    /// Weights are constants.
    Fixed,
    /// Weights are free trainable scalars.
    Trainable,
    /// Weights are a softmax over trainable logits, hence convex.
    SoftmaxNormalized,
}

/// Weights merging every exit's prediction into one output.
/// Order: early exits by depth, then the final exit.
#[derive(Debug, Clone, PartialEq)]
pub struct Combiner {
    mode: CombinationMode,
    raw: Tensor,
}

impl Combiner {
    pub fn new(mode: CombinationMode, raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Config("combiner needs at least one weight".into()));
        }
        Ok(Self {
            mode,
            raw: Tensor::vector(raw),
        })
    }

    pub fn mode(&self) -> CombinationMode {
        self.mode
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    /// Effective combination weights.
    pub fn weights(&self) -> Vec<f64> {
        match self.mode {
            CombinationMode::Fixed | CombinationMode::Trainable => self.raw.data().to_vec(),
            CombinationMode::SoftmaxNormalized => {
                let mut out = vec![0.0; self.raw.numel()];
                crate::numcore::softmax_row(self.raw.data(), &mut out);
                out
            }
        }
    }

    /// Records the weights on the tape, one `[1]` scalar per exit.
    pub fn weights_graph(&self, g: &mut Graph) -> Result<Vec<Var>> {
        let raw = match self.mode {
            CombinationMode::Fixed => g.constant(self.raw.clone()),
            _ => g.param(
                ParamId::new(Group::Combiner, 0, crate::numcore::Slot::Weight),
                &self.raw,
            ),
        };
        let w = match self.mode {
            CombinationMode::SoftmaxNormalized => g.softmax(raw)?,
            _ => raw,
        };
        (0..self.raw.numel()).map(|k| g.pick(w, k)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Init {
    /// Uniform `±sqrt(6 / (in + out))`.
    #[default]
    Glorot,
    /// `I + U(-noise, noise)` for square stages; Glorot elsewhere.
    NearIdentity { noise: f64 },
}

/// Shape of a plain dense backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub input_dim: usize,
    /// Widths of stages `1..L-1`; the final stage maps to `classes`.
    pub widths: Vec<usize>,
    pub classes: usize,
    #[serde(default)]
    pub init: Init,
}

impl BackboneSpec {
    pub fn depth(&self) -> usize {
        self.widths.len() + 1
    }
}

/// Stages `1..L-1` are dense+ReLU, stage `L` is dense+softmax.
pub fn build_backbone<R: Rng + ?Sized>(spec: &BackboneSpec, rng: &mut R) -> Result<Vec<Stage>> {
    if spec.input_dim == 0 || spec.classes < 2 || spec.widths.contains(&0) {
        return Err(Error::Config(
            "backbone needs positive widths and at least two classes".into(),
        ));
    }
    let dense = |i: usize, o: usize, rng: &mut R| match spec.init {
        Init::NearIdentity { noise } if i == o => Block::dense_near_identity(i, noise, rng),
        _ => Block::dense(i, o, rng),
    };
    let mut stages = Vec::with_capacity(spec.depth());
    let mut prev = spec.input_dim;
    for &w in &spec.widths {
        stages.push(Stage::new(vec![dense(prev, w, rng), Block::relu(w)])?);
        prev = w;
    }
    stages.push(Stage::new(vec![
        Block::dense(prev, spec.classes, rng),
        Block::softmax_output(spec.classes),
    ])?);
    Ok(stages)
}

/// Tape handles for one exit.
#[derive(Debug, Clone, Copy)]
pub struct ExitVars {
    pub depth: usize,
    /// `h_i`; for the final exit this is the prediction itself.
    pub embedding: Var,
    /// Input of the head's softmax.
    pub logits: Var,
    pub probs: Var,
    pub gate: Option<Var>,
}

/// Value-level record of every exit for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitRecord {
    pub depth: usize,
    pub embedding: Tensor,
    pub prediction: Tensor,
    pub gate: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitTrace {
    /// Early exits by depth, then the final exit.
    pub exits: Vec<ExitRecord>,
    /// Backbone stages evaluated to build the trace.
    pub stages_evaluated: usize,
    /// Chosen exit depth per sample, when a policy ran.
    pub chosen: Option<Vec<usize>>,
}

impl ExitTrace {
    pub fn record(&self, depth: usize) -> Option<&ExitRecord> {
        self.exits.iter().find(|r| r.depth == depth)
    }

    pub fn final_record(&self) -> &ExitRecord {
        self.exits.last().expect("final exit is always present")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyPrediction {
    pub depth: usize,
    pub prediction: Tensor,
    pub stages_evaluated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiExitNetwork {
    input_dim: usize,
    classes: usize,
    backbone: Vec<Stage>,
    heads: Vec<AuxiliaryHead>,
    gates: Vec<ExitGate>,
    combiner: Option<Combiner>,
}

/// Builds a network from a backbone and exit depths, with fresh heads.
pub fn attach_exits<R: Rng + ?Sized>(
    backbone: Vec<Stage>,
    placement: &[usize],
    head_spec: &HeadSpec,
    rng: &mut R,
) -> Result<MultiExitNetwork> {
    let mut net = MultiExitNetwork::from_backbone(backbone)?;
    validate_placement(placement, net.depth())?;
    for &d in placement {
        let in_dim = net.backbone[d - 1].out_dim();
        net.heads
            .push(AuxiliaryHead::build(d, in_dim, net.classes, head_spec, rng)?);
    }
    Ok(net)
}

/// Exit depths must be strictly increasing and inside `1..L-1`.
pub fn validate_placement(placement: &[usize], depth: usize) -> Result<()> {
    for (k, &d) in placement.iter().enumerate() {
        if d == 0 || d >= depth {
            return Err(Error::Placement(format!(
                "exit depth {d} outside 1..={}",
                depth.saturating_sub(1)
            )));
        }
        if k > 0 && placement[k - 1] >= d {
            return Err(Error::Placement(format!(
                "exit depths must be strictly increasing: {placement:?}"
            )));
        }
    }
    Ok(())
}

impl MultiExitNetwork {
    pub fn from_backbone(backbone: Vec<Stage>) -> Result<Self> {
        let Some(last) = backbone.last() else {
            return Err(Error::Config("backbone is empty".into()));
        };
        match last.blocks().last().map(Block::kind) {
            Some(crate::numcore::BlockKind::SoftmaxOutput) => {}
            _ => {
                return Err(Error::Config(
                    "final stage must end in a softmax output".into(),
                ))
            }
        }
        for (i, pair) in backbone.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim(
                    format!("stage {}", i + 2),
                    pair[0].out_dim(),
                    pair[1].in_dim(),
                ));
            }
        }
        Ok(Self {
            input_dim: backbone[0].in_dim(),
            classes: last.out_dim(),
            backbone,
            heads: Vec::new(),
            gates: Vec::new(),
            combiner: None,
        })
    }

    /// Assembles a network from existing parts, validating every invariant.
    pub fn from_parts(
        backbone: Vec<Stage>,
        heads: Vec<AuxiliaryHead>,
        gates: Vec<ExitGate>,
        combiner: Option<Combiner>,
    ) -> Result<Self> {
        let mut net = Self::from_backbone(backbone)?;
        let placement: Vec<usize> = heads.iter().map(AuxiliaryHead::attach).collect();
        validate_placement(&placement, net.depth())?;
        for h in &heads {
            let want = net.backbone[h.attach - 1].out_dim();
            if h.in_dim() != want {
                return Err(Error::dim(format!("head at depth {}", h.attach), want, h.in_dim()));
            }
            let out = h.blocks.last().expect("non-empty").out_dim();
            if out != net.classes {
                return Err(Error::dim(format!("head at depth {}", h.attach), net.classes, out));
            }
        }
        net.heads = heads;
        if !gates.is_empty() {
            let gp: Vec<usize> = gates.iter().map(ExitGate::attach).collect();
            if gp != placement {
                return Err(Error::Config("gates must align with the exits".into()));
            }
            for g in &gates {
                let want = net.classes + net.backbone[g.attach - 1].out_dim();
                if g.dense.in_dim() != want {
                    return Err(Error::dim(format!("gate at depth {}", g.attach), want, g.dense.in_dim()));
                }
            }
        }
        net.gates = gates;
        if let Some(c) = &combiner {
            if c.raw.numel() != net.heads.len() + 1 {
                return Err(Error::dim("combiner", net.heads.len() + 1, c.raw.numel()));
            }
        }
        net.combiner = combiner;
        Ok(net)
    }

    /// Drops every head, gate and combiner, returning the untouched backbone.
    pub fn detach_exits(self) -> Vec<Stage> {
        self.backbone
    }

    pub fn depth(&self) -> usize {
        self.backbone.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn stages(&self) -> &[Stage] {
        &self.backbone
    }

    pub fn stage(&self, depth: usize) -> &Stage {
        &self.backbone[depth - 1]
    }

    pub fn stage_mut(&mut self, depth: usize) -> &mut Stage {
        &mut self.backbone[depth - 1]
    }

    pub fn heads(&self) -> &[AuxiliaryHead] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [AuxiliaryHead] {
        &mut self.heads
    }

    pub fn gates(&self) -> &[ExitGate] {
        &self.gates
    }

    pub fn combiner(&self) -> Option<&Combiner> {
        self.combiner.as_ref()
    }

    pub fn set_combiner(&mut self, combiner: Option<Combiner>) -> Result<()> {
        if let Some(c) = &combiner {
            if c.raw.numel() != self.heads.len() + 1 {
                return Err(Error::dim("combiner", self.heads.len() + 1, c.raw.numel()));
            }
        }
        self.combiner = combiner;
        Ok(())
    }

    /// Attaches a freshly initialized gate at every exit.
    pub fn attach_gates<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.gates = self
            .heads
            .iter()
            .map(|h| {
                let d = h.attach;
                ExitGate::build(d, self.backbone[d - 1].out_dim(), self.classes, rng)
            })
            .collect();
    }

    pub fn has_gates(&self) -> bool {
        !self.gates.is_empty()
    }

    /// Depths of the early exits.
    pub fn exit_depths(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.attach).collect()
    }

    /// Early exit depths followed by the final depth `L`.
    pub fn all_exit_depths(&self) -> Vec<usize> {
        let mut v = self.exit_depths();
        v.push(self.depth());
        v
    }

    pub fn head_at(&self, depth: usize) -> Option<&AuxiliaryHead> {
        self.heads.iter().find(|h| h.attach == depth)
    }

    fn head_position(&self, depth: usize) -> Option<usize> {
        self.heads.iter().position(|h| h.attach == depth)
    }

    /// Records stage `depth` on the tape.
    pub fn stage_graph(&self, g: &mut Graph, depth: usize, input: Var, frozen: bool) -> Result<Var> {
        let mut h = input;
        for (b, block) in self.backbone[depth - 1].blocks.iter().enumerate() {
            h = forward_block(g, block, h, Group::Stage(depth), b, frozen)?;
        }
        Ok(h)
    }

    /// Records head `depth` on the tape, returning `(logits, probs)`.
    pub fn head_graph(&self, g: &mut Graph, depth: usize, h: Var, frozen: bool) -> Result<(Var, Var)> {
        let head = self
            .head_at(depth)
            .ok_or_else(|| Error::Contract(format!("no exit at depth {depth}")))?;
        head_blocks_graph(g, &head.blocks, Group::Head(depth), h, frozen)
    }

    /// Records gate `depth` on the tape as an `[n, 1]` column in (0, 1).
    pub fn gate_graph(&self, g: &mut Graph, depth: usize, logits: Var, h: Var, frozen: bool) -> Result<Var> {
        let gate = self
            .gates
            .iter()
            .find(|gt| gt.attach == depth)
            .ok_or_else(|| Error::Contract(format!("no gate at depth {depth}")))?;
        let input = g.concat(logits, h)?;
        let z = forward_block(g, &gate.dense, input, Group::Gate(depth), 0, frozen)?;
        Ok(g.sigmoid(z))
    }

    /// Full forward on the tape. Each stage is recorded once and its output
    /// feeds both the next stage and the head attached to it.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Vec<ExitVars>> {
        self.check_input(g.value(x))?;
        let mut out = Vec::with_capacity(self.heads.len() + 1);
        let mut h = x;
        for depth in 1..=self.depth() {
            if depth == self.depth() {
                let (logits, probs) = head_blocks_graph(
                    g,
                    &self.backbone[depth - 1].blocks,
                    Group::Stage(depth),
                    h,
                    false,
                )
                .map_err(|e| with_context(e, depth))?;
                h = probs;
                out.push(ExitVars {
                    depth,
                    embedding: h,
                    logits,
                    probs,
                    gate: None,
                });
            } else {
                h = self
                    .stage_graph(g, depth, h, false)
                    .map_err(|e| with_context(e, depth))?;
                if self.head_at(depth).is_none() {
                    continue;
                }
                let (logits, probs) = self
                    .head_graph(g, depth, h, false)
                    .map_err(|e| with_context(e, depth))?;
                let gate = if self.has_gates() {
                    Some(self.gate_graph(g, depth, logits, h, false)?)
                } else {
                    None
                };
                out.push(ExitVars {
                    depth,
                    embedding: h,
                    logits,
                    probs,
                    gate,
                });
            }
        }
        Ok(out)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.last_dim() != self.input_dim {
            return Err(Error::dim("network input", self.input_dim, x.last_dim()));
        }
        Ok(())
    }

    /// Every exit's embedding and prediction for a `[n, input_dim]` batch,
    /// from a single pass over the backbone.
    pub fn forward_all_exits(&self, x: &Tensor) -> Result<ExitTrace> {
        let mut g = Graph::new();
        let xv = g.constant(x.as_matrix());
        self.check_input(g.value(xv))?;
        let mut exits = Vec::with_capacity(self.heads.len() + 1);
        let mut h = xv;
        let mut evaluated = 0;
        for depth in 1..=self.depth() {
            h = self
                .stage_graph(&mut g, depth, h, true)
                .map_err(|e| with_context(e, depth))?;
            evaluated += 1;
            if depth == self.depth() {
                exits.push(ExitRecord {
                    depth,
                    embedding: g.value(h).clone(),
                    prediction: g.value(h).clone(),
                    gate: None,
                });
            } else if self.head_at(depth).is_some() {
                let (logits, probs) = self
                    .head_graph(&mut g, depth, h, true)
                    .map_err(|e| with_context(e, depth))?;
                let gate = if self.has_gates() {
                    let gv = self.gate_graph(&mut g, depth, logits, h, true)?;
                    Some(g.value(gv).data().to_vec())
                } else {
                    None
                };
                exits.push(ExitRecord {
                    depth,
                    embedding: g.value(h).clone(),
                    prediction: g.value(probs).clone(),
                    gate,
                });
            }
        }
        Ok(ExitTrace {
            exits,
            stages_evaluated: evaluated,
            chosen: None,
        })
    }

    /// Evaluates only stages `1..=stop` and, for an early exit, its head.
    pub fn forward_until(&self, x: &Tensor, stop: usize) -> Result<EarlyPrediction> {
        if stop != self.depth() && self.head_at(stop).is_none() {
            return Err(Error::Contract(format!(
                "depth {stop} is not an exit (exits: {:?})",
                self.all_exit_depths()
            )));
        }
        let mut cursor = ExitCursor::new(self, x)?;
        cursor.advance_to(stop)?;
        let prediction = cursor.prediction()?;
        Ok(EarlyPrediction {
            depth: stop,
            prediction,
            stages_evaluated: cursor.stages_evaluated(),
        })
    }

    /// Plain backbone prediction.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_until(x, self.depth())?.prediction)
    }

    /// Every trainable parameter with its id.
    pub fn params_mut(&mut self) -> Vec<(ParamId, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, stage) in self.backbone.iter_mut().enumerate() {
            for (b, block) in stage.blocks.iter_mut().enumerate() {
                for (slot, t) in block.params_mut() {
                    out.push((ParamId::new(Group::Stage(i + 1), b, *slot), t));
                }
            }
        }
        for head in &mut self.heads {
            let d = head.attach;
            for (b, block) in head.blocks.iter_mut().enumerate() {
                for (slot, t) in block.params_mut() {
                    out.push((ParamId::new(Group::Head(d), b, *slot), t));
                }
            }
        }
        for gate in &mut self.gates {
            let d = gate.attach;
            for (slot, t) in gate.dense.params_mut() {
                out.push((ParamId::new(Group::Gate(d), 0, *slot), t));
            }
        }
        if let Some(c) = &mut self.combiner {
            if c.mode != CombinationMode::Fixed {
                out.push((
                    ParamId::new(Group::Combiner, 0, crate::numcore::Slot::Weight),
                    &mut c.raw,
                ));
            }
        }
        out
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        let blocks = |out: &mut Vec<ParamId>, group: Group, blocks: &[Block]| {
            for (b, block) in blocks.iter().enumerate() {
                for (slot, _) in block.params() {
                    out.push(ParamId::new(group, b, *slot));
                }
            }
        };
        for (i, stage) in self.backbone.iter().enumerate() {
            blocks(&mut out, Group::Stage(i + 1), &stage.blocks);
        }
        for head in &self.heads {
            blocks(&mut out, Group::Head(head.attach), &head.blocks);
        }
        for gate in &self.gates {
            blocks(&mut out, Group::Gate(gate.attach), std::slice::from_ref(&gate.dense));
        }
        if let Some(c) = &self.combiner {
            if c.mode != CombinationMode::Fixed {
                out.push(ParamId::new(Group::Combiner, 0, crate::numcore::Slot::Weight));
            }
        }
        out
    }

    pub fn param(&self, id: &ParamId) -> Option<&Tensor> {
        let block = match id.group {
            Group::Stage(d) => self.backbone.get(d.wrapping_sub(1))?.blocks.get(id.block)?,
            Group::Head(d) => self.head_at(d)?.blocks.get(id.block)?,
            Group::Gate(d) => &self.gates.iter().find(|g| g.attach == d)?.dense,
            Group::Combiner => return self.combiner.as_ref().map(|c| &c.raw),
        };
        block.param(id.slot)
    }

    /// Copies gradients from the tape into the parameters. Parameters the
    /// tape never saw receive zeros.
    pub fn load_grads(&mut self, g: &Graph) -> Result<()> {
        for (id, t) in self.params_mut() {
            let grad = match g.param_var(&id).and_then(|v| g.grad(v)) {
                Some(gr) => gr.to_vec(),
                None => vec![0.0; t.numel()],
            };
            t.set_grad(grad)?;
        }
        Ok(())
    }

    /// Hash of all parameter buffers in `group`.
    pub fn group_hash(&self, group: Group) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for id in self.param_ids().into_iter().filter(|id| id.group == group) {
            h.update(self.param(&id).expect("listed").content_hash().as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Hash of every backbone parameter.
    pub fn backbone_hash(&self) -> String {
        let parts: Vec<String> = (1..=self.depth())
            .map(|d| self.group_hash(Group::Stage(d)))
            .collect();
        parts.join(":")
    }

    /// Hash of every parameter in the network.
    pub fn full_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for id in self.param_ids() {
            h.update(self.param(&id).expect("listed").content_hash().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn head_blocks_graph(g: &mut Graph, blocks: &[Block], group: Group, h: Var, frozen: bool) -> Result<(Var, Var)> {
    let mut z = h;
    let mut logits = h;
    for (b, block) in blocks.iter().enumerate() {
        if b + 1 == blocks.len() {
            logits = z;
        }
        z = forward_block(g, block, z, group, b, frozen)?;
    }
    Ok((logits, z))
}

fn with_context(e: Error, depth: usize) -> Error {
    match e {
        Error::Dimension {
            context,
            expected,
            actual,
        } => Error::Dimension {
            context: format!("exit depth {depth}: {context}"),
            expected,
            actual,
        },
        other => other,
    }
}

/// Walks the backbone stage by stage, evaluating heads on demand.
#[derive(Debug)]
pub struct ExitCursor<'a> {
    net: &'a MultiExitNetwork,
    h: Tensor,
    depth: usize,
    evaluated: usize,
}

impl<'a> ExitCursor<'a> {
    pub fn new(net: &'a MultiExitNetwork, x: &Tensor) -> Result<Self> {
        net.check_input(x)?;
        Ok(Self {
            net,
            h: x.as_matrix(),
            depth: 0,
            evaluated: 0,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn stages_evaluated(&self) -> usize {
        self.evaluated
    }

    pub fn embedding(&self) -> &Tensor {
        &self.h
    }

    /// Runs stages `depth+1..=target`.
    pub fn advance_to(&mut self, target: usize) -> Result<()> {
        if target < self.depth || target > self.net.depth() {
            return Err(Error::Contract(format!(
                "cannot move cursor from depth {} to {target}",
                self.depth
            )));
        }
        while self.depth < target {
            let d = self.depth + 1;
            let mut g = Graph::new();
            let x = g.constant(std::mem::replace(&mut self.h, Tensor::scalar(0.0)));
            let y = self
                .net
                .stage_graph(&mut g, d, x, true)
                .map_err(|e| with_context(e, d))?;
            self.h = g.value(y).clone();
            self.depth = d;
            self.evaluated += 1;
        }
        Ok(())
    }

    /// Prediction at the current depth: head output for an early exit, the
    /// backbone output at depth `L`.
    pub fn prediction(&self) -> Result<Tensor> {
        Ok(self.head_outputs()?.0)
    }

    /// `(prediction, gate)` at the current depth.
    pub fn head_outputs(&self) -> Result<(Tensor, Option<Vec<f64>>)> {
        if self.depth == self.net.depth() {
            return Ok((self.h.clone(), None));
        }
        let pos = self
            .net
            .head_position(self.depth)
            .ok_or_else(|| Error::Contract(format!("no exit at depth {}", self.depth)))?;
        let mut g = Graph::new();
        let h = g.constant(self.h.clone());
        let (logits, probs) =
            head_blocks_graph(&mut g, &self.net.heads[pos].blocks, Group::Head(self.depth), h, true)?;
        let gate = if self.net.has_gates() {
            let gv = self.net.gate_graph(&mut g, self.depth, logits, h, true)?;
            Some(g.value(gv).data().to_vec())
        } else {
            None
        };
        Ok((g.value(probs).clone(), gate))
    }

    /// Keeps only the given rows (samples that continue).
    pub fn retain_rows(&mut self, rows: &[usize]) {
        self.h = self.h.select_rows(rows);
    }
}
