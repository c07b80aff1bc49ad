use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::exitnet::MultiExitNetwork;
use crate::numcore::Tensor;
use crate::{Error, Result};

use crate::data::write_with_schema;

/// Agreement between each early exit and the final exit on labeled data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverthinkReport {
    pub exit_depths: Vec<usize>,
    pub samples: usize,
    /// Early exit right, final exit wrong.
    pub correct_here_wrong_final: Vec<usize>,
    /// Early exit wrong, final exit right.
    pub wrong_here_correct_final: Vec<usize>,
    /// Samples that some early exit gets right while the final exit does not.
    pub overthought: usize,
    pub rate: f64,
}

impl OverthinkReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["exit_depth", "correct_here_wrong_final", "wrong_here_correct_final"])?;
        for (j, d) in self.exit_depths.iter().enumerate() {
            w.write_record([
                d.to_string(),
                self.correct_here_wrong_final[j].to_string(),
                self.wrong_here_correct_final[j].to_string(),
            ])?;
        }
        write_with_schema(path, "overthinking", w)
    }
}

/// Builds the report from stored argmax predictions, one row per exit with
/// the final exit last.
pub fn overthinking_from_argmax(argmax: &[Vec<usize>], labels: &[usize], exit_depths: &[usize]) -> Result<OverthinkReport> {
    let Some((last, early)) = argmax.split_last() else {
        return Err(Error::Contract("no exits to compare".into()));
    };
    if early.len() != exit_depths.len() {
        return Err(Error::dim("over-thinking exit depths", early.len(), exit_depths.len()));
    }
    if let Some(row) = argmax.iter().find(|r| r.len() != labels.len()) {
        return Err(Error::dim("over-thinking predictions", labels.len(), row.len()));
    }
    let final_ok: Vec<bool> = last.iter().zip(labels).map(|(p, y)| p == y).collect();
    let mut ahead = vec![0; early.len()];
    let mut behind = vec![0; early.len()];
    let mut flagged = vec![false; labels.len()];
    for (j, row) in early.iter().enumerate() {
        for (i, (p, y)) in row.iter().zip(labels).enumerate() {
            match (p == y, final_ok[i]) {
                (true, false) => {
                    ahead[j] += 1;
                    flagged[i] = true;
                }
                (false, true) => behind[j] += 1,
                _ => {}
            }
        }
    }
    let overthought = flagged.iter().filter(|&&f| f).count();
    Ok(OverthinkReport {
        exit_depths: exit_depths.to_vec(),
        samples: labels.len(),
        correct_here_wrong_final: ahead,
        wrong_here_correct_final: behind,
        overthought,
        rate: if labels.is_empty() {
            0.0
        } else {
            overthought as f64 / labels.len() as f64
        },
    })
}

pub fn overthinking_report(net: &MultiExitNetwork, x: &Tensor, y: &[usize]) -> Result<OverthinkReport> {
    let trace = net.forward_all_exits(x)?;
    let argmax: Vec<Vec<usize>> = trace.exits.iter().map(|r| r.prediction.argmax_rows()).collect();
    overthinking_from_argmax(&argmax, y, &net.exit_depths())
}
