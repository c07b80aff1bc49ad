//! Training strategies for multi-exit networks.
//!
//! Every strategy drives the same minibatch SGD loop; they differ in the
//! objective recorded on the tape, in which parameter groups are allowed to
//! move, and in what data each phase sees.

mod config;
pub mod objectives;

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{write_with_schema, Dataset};
use crate::exitnet::{Combiner, CombinationMode, MultiExitNetwork};
use crate::numcore::{
    cross_entropy, derive_seed, seeded_rng, Block, Graph, Group, LrSchedule, Rng, SgdOptimizer, Slot, Tensor, Var,
};
use crate::{Error, Result};

pub use config::{
    equispaced_freezeout_points, freezeout_lr, freezeout_schedule, CombinationConfig, ExitWeights, Strategy,
    TrainingConfig,
};
pub use objectives::Objective;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const FEEDBACK_STREAM: u64 = 0x4642_4b00;
const HEAD_STREAM: u64 = 0x4845_4144;

/// Per-epoch minibatch orders drawn from a seeded stream. Strategies trained
/// with the same seed see the same orders.
#[derive(Debug, Clone)]
pub struct BatchOrder {
    rng: Rng,
}

impl BatchOrder {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: seeded_rng(derive_seed(seed, SHUFFLE_STREAM)),
        }
    }

    pub fn next_epoch(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order
    }
}

/// Fixed forward matrix `M` of an exit and the distinct backward matrix `K`
/// used to route its error into the stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomFeedbackPair {
    pub depth: usize,
    pub m: Tensor,
    pub k: Tensor,
}

impl RandomFeedbackPair {
    /// Draws `M` then `K`, both `[embed_dim, classes]`, uniform in
    /// `±sqrt(6 / (embed_dim + classes))`.
    pub fn draw<R: rand::Rng + ?Sized>(depth: usize, embed_dim: usize, classes: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (embed_dim + classes) as f64).sqrt();
        let mut sample = || {
            let v = (0..embed_dim * classes)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            Tensor::new(vec![embed_dim, classes], v).expect("shape")
        };
        let m = sample();
        let k = sample();
        Self { depth, m, k }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    /// Mean minibatch objective over the epoch.
    pub objective: f64,
    /// Per-exit mean cross-entropy on the training set, early exits first.
    pub exit_loss: Vec<f64>,
    pub exit_accuracy: Vec<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub strategy: Strategy,
    pub exit_depths: Vec<usize>,
    pub epochs: Vec<EpochMetrics>,
    /// Training error of exit `k` after layer-wise stage `k`.
    pub stage_errors: Vec<f64>,
    /// Effective combiner weights after every optimizer step.
    pub combiner_history: Vec<Vec<f64>>,
    /// Parameter hash of every group at the end of each recorded epoch.
    pub group_hashes: Vec<BTreeMap<Group, String>>,
    pub feedback: Vec<RandomFeedbackPair>,
    pub steps: u64,
}

impl TrainReport {
    fn new(strategy: Strategy, net: &MultiExitNetwork) -> Self {
        Self {
            strategy,
            exit_depths: net.all_exit_depths(),
            epochs: Vec::new(),
            stage_errors: Vec::new(),
            combiner_history: Vec::new(),
            group_hashes: Vec::new(),
            feedback: Vec::new(),
            steps: 0,
        }
    }

    /// Per-exit loss curve, one value per recorded epoch.
    pub fn loss_curve(&self, depth: usize) -> Option<Vec<f64>> {
        let k = self.exit_depths.iter().position(|&d| d == depth)?;
        Some(self.epochs.iter().map(|e| e.exit_loss[k]).collect())
    }

    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["phase".to_string(), "epoch".into(), "objective".into()];
        header.extend(self.exit_depths.iter().map(|d| format!("loss_exit{d}")));
        header.extend(self.exit_depths.iter().map(|d| format!("acc_exit{d}")));
        header.push("wall_ms".into());
        w.write_record(&header)?;
        for e in &self.epochs {
            let mut rec = vec![e.phase.clone(), e.epoch.to_string(), format!("{:?}", e.objective)];
            rec.extend(e.exit_loss.iter().map(|v| format!("{v:?}")));
            rec.extend(e.exit_accuracy.iter().map(|v| format!("{v:?}")));
            rec.push(format!("{:?}", e.wall_ms));
            w.write_record(&rec)?;
        }
        write_with_schema(path, "train-metrics", w)
    }
}

/// Mean cross-entropy and accuracy of every exit on `(x, y)`.
pub fn exit_metrics(net: &MultiExitNetwork, x: &Tensor, y: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let trace = net.forward_all_exits(x)?;
    let n = y.len() as f64;
    let mut losses = Vec::with_capacity(trace.exits.len());
    let mut accs = Vec::with_capacity(trace.exits.len());
    for r in &trace.exits {
        let mut loss = 0.0;
        let mut hits = 0usize;
        for (i, &t) in y.iter().enumerate() {
            let row = r.prediction.row(i);
            loss += cross_entropy(row, t)?;
            hits += usize::from(crate::numcore::argmax(row) == t);
        }
        losses.push(loss / n);
        accs.push(hits as f64 / n);
    }
    Ok((losses, accs))
}

type ObjectiveFn<'a> = dyn Fn(&mut Graph, &MultiExitNetwork, Var, &[usize]) -> Result<Objective> + 'a;

struct Phase<'a> {
    name: String,
    x: &'a Tensor,
    y: &'a [usize],
    shuffle_seed: u64,
    active: &'a dyn Fn(Group) -> bool,
    objective: &'a ObjectiveFn<'a>,
}

struct Loop<'a> {
    cfg: &'a TrainingConfig,
    eval: &'a Dataset,
    record_combiner: bool,
}

impl Loop<'_> {
    fn run(&self, net: &mut MultiExitNetwork, opt: &mut SgdOptimizer, phase: Phase<'_>, report: &mut TrainReport) -> Result<()> {
        let n = phase.y.len();
        if n == 0 {
            return Err(Error::Config(format!("{}: no training samples", phase.name)));
        }
        let mut order = BatchOrder::new(phase.shuffle_seed);
        for epoch in 0..self.cfg.epochs {
            let start = self.cfg.record_wall_time.then(Instant::now);
            let perm = order.next_epoch(n);
            let mut total = 0.0;
            let mut batches = 0usize;
            for idx in perm.chunks(self.cfg.batch_size) {
                let xb = phase.x.select_rows(idx);
                let yb: Vec<usize> = idx.iter().map(|&i| phase.y[i]).collect();
                let mut g = Graph::new();
                let xv = g.constant(xb);
                let obj = (phase.objective)(&mut g, net, xv, &yb)?;
                for (name, v) in &obj.parts {
                    let val = g.value(*v).data()[0];
                    if !val.is_finite() {
                        return Err(Error::Diverged {
                            location: format!("{}: {name}", phase.name),
                            loss: val,
                        });
                    }
                }
                let loss = g.value(obj.loss).data()[0];
                g.backward(obj.loss).map_err(|e| match e {
                    Error::NonFinite(what) => Error::Diverged {
                        location: format!("{}: {what}", phase.name),
                        loss,
                    },
                    other => other,
                })?;
                net.load_grads(&g)?;
                let active = phase.active;
                let (train, idle): (Vec<_>, Vec<_>) =
                    net.params_mut().into_iter().partition(|(id, _)| active(id.group));
                opt.step(train)?;
                for (_, t) in idle {
                    t.clear_grad();
                }
                if self.record_combiner {
                    if let Some(c) = net.combiner() {
                        report.combiner_history.push(c.weights());
                    }
                }
                total += loss;
                batches += 1;
            }
            let (exit_loss, exit_accuracy) = exit_metrics(net, &self.eval.x, &self.eval.y)?;
            let mut groups: Vec<Group> = net.param_ids().into_iter().map(|id| id.group).collect();
            groups.dedup();
            report
                .group_hashes
                .push(groups.into_iter().map(|g| (g, net.group_hash(g))).collect());
            report.epochs.push(EpochMetrics {
                phase: phase.name.clone(),
                epoch,
                objective: total / batches as f64,
                exit_loss,
                exit_accuracy,
                wall_ms: start.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3),
            });
        }
        report.steps += opt.step_count();
        Ok(())
    }
}

fn optimizer(cfg: &TrainingConfig, net: &MultiExitNetwork) -> SgdOptimizer {
    let mut opt = SgdOptimizer::new(cfg.learning_rate);
    if cfg.stage_learning_rates.is_some() {
        for d in 1..=net.depth() {
            opt.set_group_lr(Group::Stage(d), cfg.stage_rate(d));
            opt.set_group_lr(Group::Head(d), cfg.stage_rate(d));
        }
    }
    opt
}

fn check_data(net: &MultiExitNetwork, data: &Dataset) -> Result<()> {
    if data.dim() != net.input_dim() {
        return Err(Error::dim("training data", net.input_dim(), data.dim()));
    }
    if data.classes > net.classes() {
        return Err(Error::dim("training labels", net.classes(), data.classes));
    }
    Ok(())
}

fn prepare(net: &MultiExitNetwork, data: &Dataset, cfg: &TrainingConfig) -> Result<()> {
    cfg.validate()?;
    check_data(net, data)?;
    if let Some(r) = &cfg.stage_learning_rates {
        if r.len() != net.depth() {
            return Err(Error::Config(format!(
                "{} stage learning rates for {} stages",
                r.len(),
                net.depth()
            )));
        }
    }
    Ok(())
}

fn any_group(_: Group) -> bool {
    true
}

fn single_phase(
    net: &mut MultiExitNetwork,
    data: &Dataset,
    cfg: &TrainingConfig,
    strategy: Strategy,
    objective: &ObjectiveFn<'_>,
    opt: &mut SgdOptimizer,
    record_combiner: bool,
) -> Result<TrainReport> {
    let mut report = TrainReport::new(strategy, net);
    let lp = Loop {
        cfg,
        eval: data,
        record_combiner,
    };
    lp.run(
        net,
        opt,
        Phase {
            name: strategy.name().into(),
            x: &data.x,
            y: &data.y,
            shuffle_seed: cfg.seed,
            active: &any_group,
            objective,
        },
        &mut report,
    )?;
    Ok(report)
}

/// Trains with `cfg.strategy`.
pub fn train(net: &mut MultiExitNetwork, data: &Dataset, cfg: &TrainingConfig) -> Result<TrainReport> {
    match cfg.strategy {
        Strategy::Standard => train_standard(net, data, cfg),
        Strategy::Joint => train_joint(net, data, cfg),
        Strategy::CombinedOutput => train_combined_output(net, data, cfg),
        Strategy::GatedRecursive => train_gated_recursive(net, data, cfg),
        Strategy::Layerwise => train_layerwise(net, data, cfg),
        Strategy::Separate => train_separate(net, data, cfg),
        Strategy::Freezeout => train_freezeout(net, data, cfg),
        Strategy::CostRegularized => train_cost_regularized(net, data, cfg),
        Strategy::LocalFeedback => train_local_feedback(net, data, cfg),
    }
}

/// Plain end-to-end training of the final exit.
pub fn train_standard(net: &mut MultiExitNetwork, data: &Dataset, cfg: &TrainingConfig) -> Result<TrainReport> {
    prepare(net, data, cfg)?;
    let mut opt = optimizer(cfg, net);
    single_phase(net, data, cfg, Strategy::Standard, &objectives::final_objective, &mut opt, false)
}

/// Deeply supervised training on `L + Σ α_i L_i`.
pub fn train_joint(net: &mut MultiExitNetwork, data: &Dataset, cfg: &TrainingConfig) -> Result<TrainReport> {
    prepare(net, data, cfg)?;
    let alphas = cfg.exit_weights.resolve(net.heads().len())?;
    let mut opt = optimizer(cfg, net);
    let obj = |g: &mut Graph, n: &MultiExitNetwork, x: Var, y: &[usize]| objectives::joint_objective(g, n, x, y, &alphas);
    single_phase(net, data, cfg, Strategy::Joint, &obj, &mut opt, false)
}

/// Builds the combiner described by `cfg` for a network with `exits` outputs.
pub fn combiner_from_config(cfg: &CombinationConfig, exits: usize) -> Result<Combiner> {
    let raw = match &cfg.weights {
        Some(w) if w.len() != exits => {
            return Err(Error::Config(format!(
                "{} combination weights for {exits} exits",
                w.len()
            )))
        }
        Some(w) => w.clone(),
        None => match cfg.mode {
            CombinationMode::SoftmaxNormalized => vec![0.0; exits],
            _ => vec![1.0 / exits as f64; exits],
        },
    };
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("combination weights must be finite".into()));
    }
    if cfg.mode == CombinationMode::Fixed && cfg.require_convex {
        let sum: f64 = raw.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || raw.iter().any(|&v| v < 0.0) {
            return Err(Error::Config(format!(
                "fixed combination weights {raw:?} are not convex (sum {sum})"
            )));
        }
    }
    Combiner::new(cfg.mode, raw)
}

/// Single cross-entropy on `Σ_k w_k p_k` over all exits. In trainable mode
/// the merged output is renormalized per row before the loss.
pub fn train_combined_output(net: &mut MultiExitNetwork, data: &Dataset, cfg: &TrainingConfig) -> Result<TrainReport> {
    prepare(net, data, cfg)?;
    let exits = net.heads().len() + 1;
    let keep = net
        .combiner()
        .is_some_and(|c| c.mode() == cfg.combination.mode && cfg.combination.weights.is_none());
    if !keep {
        net.set_combiner(Some(combiner_from_config(&cfg.combination, exits)?))?;
    }
    let mut opt = optimizer(cfg, net);
    single_phase(
        net,
        data,
        cfg,
        Strategy::CombinedOutput,
        &objectives::combined_objective,
        &mut opt,
        true,
    )
}

/// Cross-entropy on the recursively gated output, soft gates throughout.
pub fn train_gated_recursive(net: &mut MultiExitNetwork, data: &Dataset, cfg: &TrainingConfig) -> Result<TrainReport> {
    prepare(net, data, cfg)?;
    let mut opt = optimizer(cfg, net);
    single_phase(
        net,
        data,
        cfg,
        Strategy::GatedRecursive,
        &objectives::gated_objective,
        &mut opt,
        false,
    )
}

/// `ε_j` = MACs up to and including exit `j`, divided by the full backbone's
/// MACs. The final exit therefore costs 1.
pub fn default_cost_weights(net: &MultiExitNetwork) -> Vec<f64> {
    let full: u64 = net.stages().iter().map(|s| s.macs()).sum();
    let prefix = |d: usize| -> u64 { net.stages()[..d].iter().map(|s| s.macs()).sum() };
    let mut eps: Vec<f64> = net
        .heads()
        .iter()
        .map(|h| (prefix(h.attach()) + h.macs()) as f64 / full as f64)
        .collect();
    eps.push(1.0);
    eps
}

/// Gated task loss plus the soft expected-cost penalty.
pub fn train_cost_regularized(net: &mut MultiExitNetwork, data: &Dataset, cfg: &TrainingConfig) -> Result<TrainReport> {
    prepare(net, data, cfg)?;
    let eps = match &cfg.cost_weights {
        Some(e) => e.clone(),
        None => default_cost_weights(net),
    };
    if eps.len() != net.heads().len() + 1 {
        return Err(Error::Config(format!(
            "{} cost weights for {} exits",
            eps.len(),
            net.heads().len() + 1
        )));
    }
    let strength = cfg.cost_strength;
    let mut opt = optimizer(cfg, net);
    let obj = |g: &mut Graph, n: &MultiExitNetwork, x: Var, y: &[usize]| {
        objectives::cost_regularized_objective(g, n, x, y, &eps, strength)
    };
    single_phase(net, data, cfg, Strategy::CostRegularized, &obj, &mut opt, false)
}

/// Joint objective under per-stage cosine schedules that reach zero at each
/// stage's freezing point. Heads share their stage's schedule.
pub fn train_freezeout(net: &mut MultiExitNetwork, data: &Dataset, cfg: &TrainingConfig) -> Result<TrainReport> {
    prepare(net, data, cfg)?;
    let depth = net.depth();
    let points = cfg.resolved_freezeout_points(depth)?;
    if points.last().is_some_and(|&t| t > cfg.epochs as f64) {
        return Err(Error::Config(format!("last freezing point exceeds T = {}", cfg.epochs)));
    }
    let alphas = cfg.exit_weights.resolve(net.heads().len())?;
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size) as f64;
    let schedule = LrSchedule::PerGroup(std::sync::Arc::new(move |group, step, base| {
        let t = step as f64 / steps_per_epoch;
        match group {
            Group::Stage(d) | Group::Head(d) | Group::Gate(d) => freezeout_lr(base, t, points[d - 1]),
            Group::Combiner => base,
        }
    }));
    let mut opt = optimizer(cfg, net).with_schedule(schedule);
    let obj = |g: &mut Graph, n: &MultiExitNetwork, x: Var, y: &[usize]| objectives::joint_objective(g, n, x, y, &alphas);
    single_phase(net, data, cfg, Strategy::Freezeout, &obj, &mut opt, false)
}

/// Copies parameters block by block when both lists have identical shapes.
fn copy_if_compatible(src: &[Block], dst: &mut [Block]) -> bool {
    let same = src.len() == dst.len()
        && src
            .iter()
            .zip(dst.iter())
            .all(|(a, b)| a.kind() == b.kind() && a.in_dim() == b.in_dim() && a.out_dim() == b.out_dim());
    if same {
        dst.clone_from_slice(src);
    }
    same
}

fn stage_forward(net: &MultiExitNetwork, depth: usize, x: &Tensor) -> Result<Tensor> {
    let mut h = x.as_matrix();
    for b in net.stage(depth).blocks() {
        h = b.apply(&h)?;
    }
    Ok(h)
}

/// Greedy stage-by-stage training: stage `k` and its head learn `L_k` on
/// cached embeddings, then stage `k` is frozen and its outputs replace the
/// inputs. The last stage trains on the final loss. Each new head starts
/// from a copy of the previous one when their shapes agree.
pub fn train_layerwise(net: &mut MultiExitNetwork, data: &Dataset, cfg: &TrainingConfig) -> Result<TrainReport> {
    prepare(net, data, cfg)?;
    let depth = net.depth();
    let want: Vec<usize> = (1..depth).collect();
    if net.exit_depths() != want {
        return Err(Error::Config(format!(
            "layer-wise training needs an exit after every stage 1..{}, found {:?}",
            depth - 1,
            net.exit_depths()
        )));
    }
    let mut report = TrainReport::new(Strategy::Layerwise, net);
    let lp = Loop {
        cfg,
        eval: data,
        record_combiner: false,
    };
    let mut cache = data.x.as_matrix();
    for k in 1..=depth {
        if k > 1 {
            let prev = net.heads()[k - 2].blocks().to_vec();
            if k < depth {
                copy_if_compatible(&prev, net.heads_mut()[k - 1].blocks_mut());
            } else {
                copy_if_compatible(&prev, net.stage_mut(k).blocks_mut());
            }
        }
        let obj = move |g: &mut Graph, n: &MultiExitNetwork, x: Var, y: &[usize]| -> Result<Objective> {
            let h = n.stage_graph(g, k, x, false)?;
            let probs = if k == n.depth() { h } else { n.head_graph(g, k, h, false)?.1 };
            let loss = g.cross_entropy(probs, y)?;
            Ok(Objective {
                loss,
                parts: vec![(format!("stage {k}"), loss)],
            })
        };
        let active = move |grp: Group| grp == Group::Stage(k) || grp == Group::Head(k);
        let mut opt = optimizer(cfg, net);
        lp.run(
            net,
            &mut opt,
            Phase {
                name: format!("stage {k}"),
                x: &cache,
                y: &data.y,
                shuffle_seed: cfg.seed,
                active: &active,
                objective: &obj,
            },
            &mut report,
        )?;
        let last = report.epochs.last().expect("at least one epoch");
        report.stage_errors.push(1.0 - last.exit_accuracy[k - 1]);
        if k < depth {
            cache = stage_forward(net, k, &cache)?;
        }
    }
    Ok(report)
}

/// Embeddings `h_d` of every sample, computed by the backbone alone.
pub fn backbone_embeddings(net: &MultiExitNetwork, x: &Tensor, depth: usize) -> Result<Tensor> {
    let mut h = x.as_matrix();
    for d in 1..=depth {
        h = stage_forward(net, d, &h)?;
    }
    Ok(h)
}

/// Shuffle seed used for the head at `depth` in separate training.
pub fn head_seed(seed: u64, depth: usize) -> u64 {
    derive_seed(seed ^ HEAD_STREAM, depth as u64)
}

/// Phase 1 trains the backbone on the final loss. Phase 2 freezes it and
/// trains each head on cached embeddings with its own shuffle seed.
pub fn train_separate(net: &mut MultiExitNetwork, data: &Dataset, cfg: &TrainingConfig) -> Result<TrainReport> {
    prepare(net, data, cfg)?;
    let mut report = TrainReport::new(Strategy::Separate, net);
    let lp = Loop {
        cfg,
        eval: data,
        record_combiner: false,
    };
    let backbone_only = |g: Group| matches!(g, Group::Stage(_));
    let mut opt = optimizer(cfg, net);
    lp.run(
        net,
        &mut opt,
        Phase {
            name: "backbone".into(),
            x: &data.x,
            y: &data.y,
            shuffle_seed: cfg.seed,
            active: &backbone_only,
            objective: &objectives::final_objective,
        },
        &mut report,
    )?;
    for d in net.exit_depths() {
        let emb = backbone_embeddings(net, &data.x, d)?;
        let obj = move |g: &mut Graph, n: &MultiExitNetwork, x: Var, y: &[usize]| -> Result<Objective> {
            let (_, probs) = n.head_graph(g, d, x, false)?;
            let loss = g.cross_entropy(probs, y)?;
            Ok(Objective {
                loss,
                parts: vec![(format!("exit depth {d}"), loss)],
            })
        };
        let active = move |grp: Group| grp == Group::Head(d);
        let mut opt = optimizer(cfg, net);
        lp.run(
            net,
            &mut opt,
            Phase {
                name: format!("head {d}"),
                x: &emb,
                y: &data.y,
                shuffle_seed: head_seed(cfg.seed, d),
                active: &active,
                objective: &obj,
            },
            &mut report,
        )?;
    }
    Ok(report)
}

/// Draws one feedback pair per exit and installs `M` (with zero bias) as the
/// exit's head weights.
pub fn setup_local_feedback(net: &mut MultiExitNetwork, seed: u64) -> Result<Vec<RandomFeedbackPair>> {
    let depth = net.depth();
    let want: Vec<usize> = (1..depth).collect();
    if net.exit_depths() != want {
        return Err(Error::Config(format!(
            "local feedback needs an exit after every stage 1..{}, found {:?}",
            depth - 1,
            net.exit_depths()
        )));
    }
    let classes = net.classes();
    let mut rng = seeded_rng(derive_seed(seed, FEEDBACK_STREAM));
    let mut pairs = Vec::with_capacity(depth - 1);
    for head in net.heads_mut() {
        let d = head.attach();
        let blocks = head.blocks_mut();
        let linear = blocks.len() == 2 && blocks[0].kind() == crate::numcore::BlockKind::Dense;
        if !linear {
            return Err(Error::Config(format!(
                "local feedback needs a single dense head at depth {d}"
            )));
        }
        let pair = RandomFeedbackPair::draw(d, blocks[0].in_dim(), classes, &mut rng);
        *blocks[0].param_mut(Slot::Weight).expect("dense") = pair.m.clone();
        *blocks[0].param_mut(Slot::Bias).expect("dense") = Tensor::zeros(vec![classes]);
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Stage-local training with fixed random heads; see
/// [`objectives::local_feedback_objective`]. Only backbone stages move.
pub fn train_local_feedback(net: &mut MultiExitNetwork, data: &Dataset, cfg: &TrainingConfig) -> Result<TrainReport> {
    prepare(net, data, cfg)?;
    let pairs = setup_local_feedback(net, cfg.seed)?;
    train_with_feedback(net, data, cfg, pairs)
}

/// Local-feedback training with caller-supplied pairs, whose `M` must
/// already be installed in the heads.
pub fn train_with_feedback(
    net: &mut MultiExitNetwork,
    data: &Dataset,
    cfg: &TrainingConfig,
    pairs: Vec<RandomFeedbackPair>,
) -> Result<TrainReport> {
    prepare(net, data, cfg)?;
    let shared: Vec<(RandomFeedbackPair, Rc<Tensor>)> = pairs
        .iter()
        .map(|p| (p.clone(), Rc::new(p.k.clone())))
        .collect();
    let obj = |g: &mut Graph, n: &MultiExitNetwork, x: Var, y: &[usize]| {
        objectives::local_feedback_objective(g, n, x, y, &shared)
    };
    let backbone_only = |g: Group| matches!(g, Group::Stage(_));
    let mut report = TrainReport::new(Strategy::LocalFeedback, net);
    let lp = Loop {
        cfg,
        eval: data,
        record_combiner: false,
    };
    let mut opt = optimizer(cfg, net);
    lp.run(
        net,
        &mut opt,
        Phase {
            name: Strategy::LocalFeedback.name().into(),
            x: &data.x,
            y: &data.y,
            shuffle_seed: cfg.seed,
            active: &backbone_only,
            objective: &obj,
        },
        &mut report,
    )?;
    report.feedback = pairs;
    Ok(report)
}
