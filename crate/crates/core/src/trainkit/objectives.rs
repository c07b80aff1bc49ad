//! Training objectives recorded on a tape.

use std::rc::Rc;

use crate::exitnet::{recursive_output_graph, soft_exit_probabilities_graph, CombinationMode, ExitVars, MultiExitNetwork};
use crate::numcore::{Graph, Var};
use crate::{Error, Result};

use super::RandomFeedbackPair;

/// A scalar loss plus named per-exit terms used for divergence reports.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: Var,
    pub parts: Vec<(String, Var)>,
}

fn exit_name(depth: usize) -> String {
    format!("exit depth {depth}")
}

fn final_exit(exits: &[ExitVars]) -> &ExitVars {
    exits.last().expect("final exit is always present")
}

/// Cross-entropy of the final exit alone.
pub fn final_objective(g: &mut Graph, net: &MultiExitNetwork, x: Var, y: &[usize]) -> Result<Objective> {
    let exits = net.forward_graph(g, x)?;
    let f = final_exit(&exits);
    let loss = g.cross_entropy(f.probs, y)?;
    Ok(Objective {
        loss,
        parts: vec![(exit_name(f.depth), loss)],
    })
}

/// `L + Σ α_i L_i`. Terms with `α_i = 0` are left off the tape entirely.
pub fn joint_objective(g: &mut Graph, net: &MultiExitNetwork, x: Var, y: &[usize], alphas: &[f64]) -> Result<Objective> {
    let exits = net.forward_graph(g, x)?;
    if alphas.len() + 1 != exits.len() {
        return Err(Error::Config(format!(
            "{} exit weights for {} early exits",
            alphas.len(),
            exits.len() - 1
        )));
    }
    let mut parts = Vec::with_capacity(exits.len());
    let mut early = Vec::new();
    for (e, &a) in exits.iter().zip(alphas) {
        let l = g.cross_entropy(e.probs, y)?;
        parts.push((exit_name(e.depth), l));
        if a != 0.0 {
            early.push(g.scale(l, a));
        }
    }
    let f = final_exit(&exits);
    let mut loss = g.cross_entropy(f.probs, y)?;
    parts.push((exit_name(f.depth), loss));
    for term in early {
        loss = g.add(loss, term)?;
    }
    Ok(Objective { loss, parts })
}

/// Cross-entropy of the weighted merge of every exit's prediction.
pub fn combined_objective(g: &mut Graph, net: &MultiExitNetwork, x: Var, y: &[usize]) -> Result<Objective> {
    let combiner = net
        .combiner()
        .ok_or_else(|| Error::Config("combined-output training needs a combiner".into()))?;
    let exits = net.forward_graph(g, x)?;
    let weights = combiner.weights_graph(g)?;
    let mut parts = Vec::with_capacity(exits.len() + 1);
    let mut merged: Option<Var> = None;
    for (e, &w) in exits.iter().zip(&weights) {
        let l = g.cross_entropy(e.probs, y)?;
        parts.push((exit_name(e.depth), l));
        let term = g.scale_by(e.probs, w)?;
        merged = Some(match merged {
            None => term,
            Some(m) => g.add(m, term)?,
        });
    }
    let mut merged = merged.expect("at least the final exit");
    if combiner.mode() == CombinationMode::Trainable {
        merged = g.normalize_rows(merged)?;
    }
    let loss = g.cross_entropy(merged, y)?;
    parts.push(("combined output".into(), loss));
    Ok(Objective { loss, parts })
}

fn require_gates(net: &MultiExitNetwork) -> Result<()> {
    if net.gates().len() != net.heads().len() {
        let missing: Vec<usize> = net
            .exit_depths()
            .into_iter()
            .filter(|d| !net.gates().iter().any(|g| g.attach() == *d))
            .collect();
        return Err(Error::Config(format!("missing gate at exit depths {missing:?}")));
    }
    Ok(())
}

struct GatedParts {
    output: Var,
    gates: Vec<Var>,
    parts: Vec<(String, Var)>,
}

fn gated_output(g: &mut Graph, net: &MultiExitNetwork, x: Var, y: &[usize]) -> Result<GatedParts> {
    require_gates(net)?;
    let exits = net.forward_graph(g, x)?;
    let (early, last) = exits.split_at(exits.len() - 1);
    let mut parts = Vec::with_capacity(exits.len() + 1);
    for e in &exits {
        let l = g.cross_entropy(e.probs, y)?;
        parts.push((exit_name(e.depth), l));
    }
    let preds: Vec<Var> = early.iter().map(|e| e.probs).collect();
    let gates: Vec<Var> = early.iter().map(|e| e.gate.expect("gates checked")).collect();
    let output = recursive_output_graph(g, &preds, &gates, last[0].probs)?;
    Ok(GatedParts { output, gates, parts })
}

/// Cross-entropy of the recursively gated output `ĉ_1`.
pub fn gated_objective(g: &mut Graph, net: &MultiExitNetwork, x: Var, y: &[usize]) -> Result<Objective> {
    let GatedParts { output, mut parts, .. } = gated_output(g, net, x, y)?;
    let loss = g.cross_entropy(output, y)?;
    parts.push(("gated output".into(), loss));
    Ok(Objective { loss, parts })
}

/// Gated task loss plus `strength · mean_i Σ_j p_ij ε_j`, where the final
/// exit takes the remaining probability mass. `eps` lists early exits first.
pub fn cost_regularized_objective(
    g: &mut Graph,
    net: &MultiExitNetwork,
    x: Var,
    y: &[usize],
    eps: &[f64],
    strength: f64,
) -> Result<Objective> {
    if eps.len() != net.heads().len() + 1 {
        return Err(Error::Config(format!(
            "{} cost weights for {} exits",
            eps.len(),
            net.heads().len() + 1
        )));
    }
    if let Some(bad) = eps.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
        return Err(Error::Config(format!("cost weight {bad} must be positive")));
    }
    let GatedParts {
        output,
        gates,
        mut parts,
    } = gated_output(g, net, x, y)?;
    let task = g.cross_entropy(output, y)?;
    parts.push(("gated output".into(), task));
    if strength == 0.0 || gates.is_empty() {
        return Ok(Objective { loss: task, parts });
    }
    let (probs, rest) = soft_exit_probabilities_graph(g, &gates)?;
    let mut per_sample = g.scale(rest.expect("at least one gate"), eps[eps.len() - 1]);
    for (p, &e) in probs.iter().zip(eps) {
        let term = g.scale(*p, e);
        per_sample = g.add(per_sample, term)?;
    }
    let cost = g.mean(per_sample);
    parts.push(("expected cost".into(), cost));
    let reg = g.scale(cost, strength);
    let loss = g.add(task, reg)?;
    Ok(Objective { loss, parts })
}

/// Sum of stage-local losses. Each stage sees a detached copy of the previous
/// stage's output; an early stage's error reaches it through `x · M` forward
/// and `K` backward, the final stage trains on its own cross-entropy.
pub fn local_feedback_objective(
    g: &mut Graph,
    net: &MultiExitNetwork,
    x: Var,
    y: &[usize],
    pairs: &[(RandomFeedbackPair, Rc<crate::numcore::Tensor>)],
) -> Result<Objective> {
    let mut h = x;
    let mut parts = Vec::with_capacity(net.depth());
    let mut total: Option<Var> = None;
    for depth in 1..=net.depth() {
        let out = net.stage_graph(g, depth, h, false)?;
        let loss = if depth == net.depth() {
            g.cross_entropy(out, y)?
        } else {
            let (pair, k) = pairs
                .iter()
                .find(|(p, _)| p.depth == depth)
                .ok_or_else(|| Error::Config(format!("no feedback pair at depth {depth}")))?;
            let m = g.constant(pair.m.clone());
            let logits = g.feedback_matmul(out, m, Rc::clone(k))?;
            let probs = g.softmax(logits)?;
            g.cross_entropy(probs, y)?
        };
        parts.push((format!("stage {depth}"), loss));
        total = Some(match total {
            None => loss,
            Some(t) => g.add(t, loss)?,
        });
        let detached = g.value(out).clone();
        h = g.constant(detached);
    }
    Ok(Objective {
        loss: total.expect("at least one stage"),
        parts,
    })
}
