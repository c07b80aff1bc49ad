use serde::{Deserialize, Serialize};

use crate::exitnet::{ExitTrace, MultiExitNetwork};
use crate::numcore::{argmax, Tensor};
use crate::{Error, Result};

use super::{normalized_entropy, simulated_accuracy, ExitPolicy};

/// `{0.00, 0.01, …, 1.00}`.
pub fn threshold_grid() -> Vec<f64> {
    (0..=100).map(|k| k as f64 / 100.0).collect()
}

fn labeled_trace(net: &MultiExitNetwork, x: &Tensor, y: &[usize]) -> Result<ExitTrace> {
    if y.is_empty() {
        return Err(Error::Contract("calibration needs a non-empty validation set".into()));
    }
    if x.rows() != y.len() {
        return Err(Error::dim("validation labels", x.rows(), y.len()));
    }
    net.forward_all_exits(x)
}

/// Picks, independently for every early exit, the largest grid `β` whose
/// stopping set is non-empty and loses at most `budget` accuracy against the
/// final exit on that same set. Exits where no `β` qualifies get 0.
pub fn calibrate_thresholds_per_exit(net: &MultiExitNetwork, x: &Tensor, y: &[usize], budget: f64) -> Result<Vec<f64>> {
    if budget.is_nan() || budget < 0.0 {
        return Err(Error::Config(format!("accuracy budget {budget} must be nonnegative")));
    }
    let trace = labeled_trace(net, x, y)?;
    let fin = trace.final_record();
    let final_ok: Vec<bool> = (0..y.len()).map(|i| argmax(fin.prediction.row(i)) == y[i]).collect();
    let mut betas = Vec::with_capacity(trace.exits.len() - 1);
    for rec in &trace.exits[..trace.exits.len() - 1] {
        let mut scored = Vec::with_capacity(y.len());
        for (i, &label) in y.iter().enumerate() {
            let p = rec.prediction.row(i);
            scored.push((normalized_entropy(p, p.len())?, argmax(p) == label, final_ok[i]));
        }
        betas.push(largest_safe_threshold(&scored, budget));
    }
    Ok(betas)
}

/// Largest grid `β` for one exit given `(entropy, exit correct, final
/// correct)` per sample, or 0 when none qualifies.
pub fn largest_safe_threshold(scored: &[(f64, bool, bool)], budget: f64) -> f64 {
    threshold_grid()
        .into_iter()
        .rev()
        .find(|&beta| {
            let (mut n, mut here, mut there) = (0usize, 0usize, 0usize);
            for &(h, ok, fin_ok) in scored {
                if h <= beta {
                    n += 1;
                    here += usize::from(ok);
                    there += usize::from(fin_ok);
                }
            }
            n > 0 && (here as f64 / n as f64) >= (there as f64 / n as f64) - budget
        })
        .unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStep {
    pub iteration: usize,
    pub beta: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleThresholdResult {
    pub beta: f64,
    pub accuracy: f64,
    pub target: f64,
    /// Whether the returned accuracy is within ±0.01 of the target.
    pub converged: bool,
    pub log: Vec<CalibrationStep>,
}

/// Tunes one shared entropy threshold with `β ← clip(β + μ·(acc(β) − target))`
/// starting from 0. Returns the first `β` within ±0.01 of the target, or the
/// closest one visited.
pub fn calibrate_single_threshold(
    net: &MultiExitNetwork,
    x: &Tensor,
    y: &[usize],
    target: f64,
    mu: f64,
    max_iters: usize,
) -> Result<SingleThresholdResult> {
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(Error::Config(format!("step size {mu} must be finite and nonnegative")));
    }
    let trace = labeled_trace(net, x, y)?;
    let acc = |beta: f64| simulated_accuracy(&trace, &ExitPolicy::entropy(beta), y);
    let at_zero = acc(0.0)?;
    if !(target <= at_zero) {
        return Err(Error::Infeasible {
            target,
            min: acc(1.0)?,
            max: at_zero,
        });
    }
    let mut beta = 0.0;
    let mut log = Vec::new();
    let mut best = CalibrationStep {
        iteration: 0,
        beta,
        accuracy: at_zero,
    };
    for iteration in 0..=max_iters {
        let a = if iteration == 0 { at_zero } else { acc(beta)? };
        let step = CalibrationStep {
            iteration,
            beta,
            accuracy: a,
        };
        log.push(step);
        if (a - target).abs() < (best.accuracy - target).abs() {
            best = step;
        }
        if (a - target).abs() <= 0.01 {
            best = step;
            break;
        }
        beta = (beta + mu * (a - target)).clamp(0.0, 1.0);
    }
    Ok(SingleThresholdResult {
        beta: best.beta,
        accuracy: best.accuracy,
        target,
        converged: (best.accuracy - target).abs() <= 0.01,
        log,
    })
}
