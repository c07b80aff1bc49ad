//! Exit policies, cascaded inference with cost accounting, threshold
//! calibration and over-thinking diagnostics.

mod calibrate;
mod overthink;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_with_schema;
use crate::exitnet::{ExitCursor, ExitTrace, MultiExitNetwork};
use crate::numcore::{argmax, Tensor};
use crate::{Error, Result};

pub use calibrate::{
    calibrate_single_threshold, calibrate_thresholds_per_exit, largest_safe_threshold, threshold_grid, CalibrationStep, SingleThresholdResult,
};
pub use overthink::{overthinking_from_argmax, overthinking_report, OverthinkReport};

/// `-(1/ln C) Σ p ln p`, with `0·ln 0 = 0`, clamped to `[0, 1]`.
pub fn normalized_entropy(pred: &[f64], classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(Error::Contract(format!("entropy needs at least two classes, got {classes}")));
    }
    let h: f64 = pred
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    Ok((h / (classes as f64).ln()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Thresholds {
    Shared(f64),
    PerExit(Vec<f64>),
}

impl Thresholds {
    pub fn at(&self, pos: usize) -> f64 {
        match self {
            Thresholds::Shared(b) => *b,
            Thresholds::PerExit(v) => v[pos],
        }
    }

    fn validate(&self, exits: usize) -> Result<()> {
        let vals: &[f64] = match self {
            Thresholds::Shared(b) => std::slice::from_ref(b),
            Thresholds::PerExit(v) => {
                if v.len() != exits {
                    return Err(Error::Config(format!("{} thresholds for {exits} early exits", v.len())));
                }
                v
            }
        };
        if let Some(b) = vals.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::Config(format!("threshold {b} outside [0, 1]")));
        }
        Ok(())
    }
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExitPolicy {
    /// Stop when the normalized entropy is at most `β_i`.
    EntropyThreshold { thresholds: Thresholds },
    /// Stop when the top probability is at least `β_i`.
    MaxConfidence { thresholds: Thresholds },
    /// Stop when the exit's gate is at least `cutoff`.
    LearnedGate {
        #[serde(default = "half")]
        cutoff: f64,
    },
    AlwaysFinal,
    /// Every sample exits at `depth` (which may be the final depth).
    FixedExit { depth: usize },
}

impl ExitPolicy {
    pub fn entropy(beta: f64) -> Self {
        ExitPolicy::EntropyThreshold {
            thresholds: Thresholds::Shared(beta),
        }
    }

    pub fn entropy_per_exit(betas: Vec<f64>) -> Self {
        ExitPolicy::EntropyThreshold {
            thresholds: Thresholds::PerExit(betas),
        }
    }

    pub fn validate(&self, net: &MultiExitNetwork) -> Result<()> {
        let exits = net.heads().len();
        match self {
            ExitPolicy::EntropyThreshold { thresholds } | ExitPolicy::MaxConfidence { thresholds } => {
                thresholds.validate(exits)
            }
            ExitPolicy::LearnedGate { cutoff } => {
                if !(0.0..=1.0).contains(cutoff) {
                    return Err(Error::Config(format!("gate cutoff {cutoff} outside [0, 1]")));
                }
                if exits > 0 && !net.has_gates() {
                    return Err(Error::Config("learned-gate policy needs gates".into()));
                }
                Ok(())
            }
            ExitPolicy::AlwaysFinal => Ok(()),
            ExitPolicy::FixedExit { depth } => {
                if net.all_exit_depths().contains(depth) {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "fixed exit {depth} is not one of {:?}",
                        net.all_exit_depths()
                    )))
                }
            }
        }
    }

    /// Whether the head at early-exit `depth` is evaluated when a sample
    /// reaches it.
    pub fn consults(&self, depth: usize) -> bool {
        match self {
            ExitPolicy::AlwaysFinal => false,
            ExitPolicy::FixedExit { depth: k } => *k == depth,
            _ => true,
        }
    }
}

/// Stop-or-continue at early exit number `pos` (0-based), located at `depth`.
pub fn decide_exit(policy: &ExitPolicy, pos: usize, depth: usize, pred: &[f64], gate: Option<f64>) -> Result<bool> {
    Ok(match policy {
        ExitPolicy::EntropyThreshold { thresholds } => normalized_entropy(pred, pred.len())? <= thresholds.at(pos),
        ExitPolicy::MaxConfidence { thresholds } => {
            pred.iter().cloned().fold(f64::NEG_INFINITY, f64::max) >= thresholds.at(pos)
        }
        ExitPolicy::LearnedGate { cutoff } => {
            gate.ok_or_else(|| Error::Config(format!("no gate at depth {depth}")))? >= *cutoff
        }
        ExitPolicy::AlwaysFinal => false,
        ExitPolicy::FixedExit { depth: k } => *k == depth,
    })
}

/// Per-stage and per-head costs in arbitrary units (MACs by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitCosts {
    /// `γ_{f_d}` for `d = 1..=L`.
    pub stage: Vec<f64>,
    /// Head cost keyed by exit depth.
    pub head: BTreeMap<usize, f64>,
}

impl ExitCosts {
    /// Static multiply-accumulate counts of the network's blocks.
    pub fn from_network(net: &MultiExitNetwork) -> Self {
        Self {
            stage: net.stages().iter().map(|s| s.macs() as f64).collect(),
            head: net.heads().iter().map(|h| (h.attach(), h.macs() as f64)).collect(),
        }
    }

    /// Cumulative backbone cost `γ_d`.
    pub fn gamma(&self, depth: usize) -> f64 {
        self.stage[..depth].iter().sum()
    }

    fn check(&self, net: &MultiExitNetwork) -> Result<()> {
        if self.stage.len() != net.depth() {
            return Err(Error::dim("stage costs", net.depth(), self.stage.len()));
        }
        for d in net.exit_depths() {
            if !self.head.contains_key(&d) {
                return Err(Error::Config(format!("no head cost for exit depth {d}")));
            }
        }
        let all = self.stage.iter().chain(self.head.values());
        if let Some(bad) = all.into_iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(Error::Config(format!("cost {bad} must be finite and nonnegative")));
        }
        Ok(())
    }
}

/// Cascaded-cost bookkeeping for one inference run.
///
/// Exits are listed early exits first, final exit last. `epsilon[j]` is the
/// total cost paid by a sample that leaves at exit `j`: the backbone up to
/// that depth plus every head consulted on the way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub exit_depths: Vec<usize>,
    /// Exit position chosen for every sample.
    pub exit_of: Vec<usize>,
    /// One-hot exit indicator, one row per sample.
    pub delta: Vec<Vec<u8>>,
    /// Cumulative backbone cost `γ` at each exit depth.
    pub gamma: Vec<f64>,
    /// Head cost charged at each exit when consulted; zero for the final exit.
    pub head_cost: Vec<f64>,
    pub consulted: Vec<bool>,
    /// Cost added between exit `j-1` and exit `j`.
    pub increments: Vec<f64>,
    pub epsilon: Vec<f64>,
    /// Fraction of samples leaving at each exit.
    pub exit_fraction: Vec<f64>,
    /// `I_j`: fraction of samples reaching each exit.
    pub reach_fraction: Vec<f64>,
    pub total_cost: f64,
    pub average_cost: f64,
    /// `γ_L`, the cost of the plain backbone.
    pub full_cost: f64,
}

impl CostLedger {
    fn build(net: &MultiExitNetwork, policy: &ExitPolicy, costs: &ExitCosts, exit_of: Vec<usize>) -> Self {
        let exit_depths = net.all_exit_depths();
        let k = exit_depths.len();
        let n = exit_of.len();
        let gamma: Vec<f64> = exit_depths.iter().map(|&d| costs.gamma(d)).collect();
        let consulted: Vec<bool> = exit_depths
            .iter()
            .map(|&d| d != net.depth() && policy.consults(d))
            .collect();
        let head_cost: Vec<f64> = exit_depths
            .iter()
            .map(|d| costs.head.get(d).copied().unwrap_or(0.0))
            .collect();
        let mut increments = Vec::with_capacity(k);
        let mut epsilon = Vec::with_capacity(k);
        let mut acc = 0.0;
        for j in 0..k {
            let prev = if j == 0 { 0.0 } else { gamma[j - 1] };
            let inc = (gamma[j] - prev) + if consulted[j] { head_cost[j] } else { 0.0 };
            acc += inc;
            increments.push(inc);
            epsilon.push(acc);
        }
        let delta: Vec<Vec<u8>> = exit_of
            .iter()
            .map(|&e| (0..k).map(|j| u8::from(j == e)).collect())
            .collect();
        let mut counts = vec![0usize; k];
        for &e in &exit_of {
            counts[e] += 1;
        }
        let exit_fraction: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let mut reach_fraction = vec![0.0; k];
        let mut remaining = n;
        for j in 0..k {
            reach_fraction[j] = remaining as f64 / n as f64;
            remaining -= counts[j];
        }
        let total_cost: f64 = delta
            .iter()
            .map(|row| row.iter().zip(&epsilon).map(|(&d, e)| f64::from(d) * e).sum::<f64>())
            .sum();
        Self {
            exit_depths,
            exit_of,
            delta,
            gamma,
            head_cost,
            consulted,
            increments,
            epsilon,
            exit_fraction,
            reach_fraction,
            total_cost,
            average_cost: total_cost / n as f64,
            full_cost: costs.gamma(net.depth()),
        }
    }

    pub fn len(&self) -> usize {
        self.exit_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exit_of.is_empty()
    }

    /// Average cost divided by the plain backbone's cost.
    pub fn relative_cost(&self) -> f64 {
        self.average_cost / self.full_cost
    }

    /// Per-exit table: depth, γ, head cost, ε, exit and reach fractions.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "exit_depth",
            "gamma",
            "head_cost",
            "consulted",
            "epsilon",
            "exit_fraction",
            "reach_fraction",
        ])?;
        for j in 0..self.exit_depths.len() {
            w.write_record([
                self.exit_depths[j].to_string(),
                format!("{:?}", self.gamma[j]),
                format!("{:?}", self.head_cost[j]),
                self.consulted[j].to_string(),
                format!("{:?}", self.epsilon[j]),
                format!("{:?}", self.exit_fraction[j]),
                format!("{:?}", self.reach_fraction[j]),
            ])?;
        }
        write_with_schema(path, "exit-costs", w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveOutcome {
    /// Probability vector each sample left with.
    pub predictions: Tensor,
    pub labels: Vec<usize>,
    pub ledger: CostLedger,
}

impl AdaptiveOutcome {
    pub fn accuracy(&self, y: &[usize]) -> f64 {
        let hits = self.labels.iter().zip(y).filter(|(a, b)| a == b).count();
        hits as f64 / y.len() as f64
    }
}

/// Runs each sample through the backbone, consulting exits in order and
/// stopping at the first positive decision. Samples that never stop take
/// the final prediction. `costs` defaults to static MAC counts.
pub fn run_adaptive_inference(
    net: &MultiExitNetwork,
    policy: &ExitPolicy,
    x: &Tensor,
    costs: Option<&ExitCosts>,
) -> Result<AdaptiveOutcome> {
    policy.validate(net)?;
    let default_costs;
    let costs = match costs {
        Some(c) => c,
        None => {
            default_costs = ExitCosts::from_network(net);
            &default_costs
        }
    };
    costs.check(net)?;
    let n = x.rows();
    let classes = net.classes();
    let depths = net.all_exit_depths();
    let mut exit_of = vec![usize::MAX; n];
    let mut preds = vec![0.0; n * classes];
    let mut active: Vec<usize> = (0..n).collect();
    let mut cursor = ExitCursor::new(net, x)?;
    for (pos, &depth) in depths.iter().enumerate() {
        cursor.advance_to(depth)?;
        let last = depth == net.depth();
        if !last && !policy.consults(depth) {
            continue;
        }
        let (probs, gate) = cursor.head_outputs()?;
        let mut keep = Vec::with_capacity(active.len());
        for (r, &i) in active.iter().enumerate() {
            let row = probs.row(r);
            let stop = last || decide_exit(policy, pos, depth, row, gate.as_ref().map(|g| g[r]))?;
            if stop {
                exit_of[i] = pos;
                preds[i * classes..(i + 1) * classes].copy_from_slice(row);
            } else {
                keep.push(r);
            }
        }
        if keep.is_empty() {
            break;
        }
        if keep.len() < active.len() {
            cursor.retain_rows(&keep);
            active = keep.iter().map(|&r| active[r]).collect();
        }
    }
    debug_assert!(exit_of.iter().all(|&e| e != usize::MAX));
    let predictions = Tensor::new(vec![n, classes], preds)?;
    let labels = predictions.argmax_rows();
    Ok(AdaptiveOutcome {
        predictions,
        labels,
        ledger: CostLedger::build(net, policy, costs, exit_of),
    })
}

/// Exit position each sample would take under `policy`, replayed on a
/// precomputed trace of every exit.
pub fn simulate_policy(trace: &ExitTrace, policy: &ExitPolicy) -> Result<Vec<usize>> {
    let k = trace.exits.len();
    let n = trace.final_record().prediction.rows();
    let mut out = vec![k - 1; n];
    for (i, slot) in out.iter_mut().enumerate() {
        for (pos, r) in trace.exits[..k - 1].iter().enumerate() {
            if !policy.consults(r.depth) {
                continue;
            }
            let gate = r.gate.as_ref().map(|g| g[i]);
            if decide_exit(policy, pos, r.depth, r.prediction.row(i), gate)? {
                *slot = pos;
                break;
            }
        }
    }
    Ok(out)
}

/// Accuracy of the replayed policy against `y`.
pub fn simulated_accuracy(trace: &ExitTrace, policy: &ExitPolicy, y: &[usize]) -> Result<f64> {
    let exits = simulate_policy(trace, policy)?;
    let hits = exits
        .iter()
        .enumerate()
        .filter(|(i, &e)| argmax(trace.exits[e].prediction.row(*i)) == y[*i])
        .count();
    Ok(hits as f64 / y.len() as f64)
}
