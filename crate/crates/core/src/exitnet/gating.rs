//! Gated combination of exit predictions.
//!
//! With gates `g_1..g_K` the recursive output is
//! `ĉ_j = g_j·c_j + (1 − g_j)·ĉ_{j+1}`, with `ĉ_{K+1}` the final prediction.
//! Unrolled, exit `j` carries weight `p_j = g_j·∏_{l<j}(1 − g_l)` and the
//! final prediction carries the remainder `∏_l (1 − g_l)`.

use crate::numcore::{Graph, Var};
use crate::{Error, Result};

/// Recursive gated output for one sample.
pub fn recursive_output(preds: &[&[f64]], gates: &[f64], final_pred: &[f64]) -> Result<Vec<f64>> {
    if preds.len() != gates.len() {
        return Err(Error::dim("gated output", preds.len(), gates.len()));
    }
    let mut acc = final_pred.to_vec();
    for (c, &g) in preds.iter().zip(gates).rev() {
        if c.len() != acc.len() {
            return Err(Error::dim("gated output", acc.len(), c.len()));
        }
        for (a, &cv) in acc.iter_mut().zip(c.iter()) {
            *a = g * cv + (1.0 - g) * *a;
        }
    }
    Ok(acc)
}

/// `(p_j for every gated exit, probability of reaching the final exit)`.
pub fn exit_probabilities(gates: &[f64]) -> (Vec<f64>, f64) {
    let mut survive = 1.0;
    let mut p = Vec::with_capacity(gates.len());
    for &g in gates {
        p.push(g * survive);
        survive *= 1.0 - g;
    }
    (p, survive)
}

/// Tape version of [`recursive_output`] over `[n, C]` predictions and
/// `[n, 1]` gate columns.
pub fn recursive_output_graph(g: &mut Graph, preds: &[Var], gates: &[Var], final_pred: Var) -> Result<Var> {
    if preds.len() != gates.len() {
        return Err(Error::dim("gated output", preds.len(), gates.len()));
    }
    let mut acc = final_pred;
    for (&c, &gate) in preds.iter().zip(gates).rev() {
        let keep = g.mul_col(c, gate)?;
        let rest = g.one_minus(gate);
        let pass = g.mul_col(acc, rest)?;
        acc = g.add(keep, pass)?;
    }
    Ok(acc)
}

/// Tape version of [`exit_probabilities`]; every output is an `[n, 1]` column.
pub fn soft_exit_probabilities_graph(g: &mut Graph, gates: &[Var]) -> Result<(Vec<Var>, Option<Var>)> {
    let mut survive: Option<Var> = None;
    let mut p = Vec::with_capacity(gates.len());
    for &gate in gates {
        let pj = match survive {
            None => gate,
            Some(s) => g.mul(gate, s)?,
        };
        p.push(pj);
        let rest = g.one_minus(gate);
        survive = Some(match survive {
            None => rest,
            Some(s) => g.mul(s, rest)?,
        });
    }
    Ok((p, survive))
}
