//! Training and representation diagnostics: paired convergence runs and
//! binned mutual-information estimates for each exit embedding.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{write_with_schema, Dataset};
use crate::exitnet::{attach_exits, build_backbone, BackboneSpec, HeadSpec, MultiExitNetwork};
use crate::numcore::{seeded_rng, Tensor};
use crate::trainkit::{train, TrainingConfig};
use crate::{Error, Result};


/// Architecture rebuilt from scratch for every seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSetup {
    pub backbone: BackboneSpec,
    pub placement: Vec<usize>,
    #[serde(default)]
    pub head: HeadSpec,
    #[serde(default)]
    pub gates: bool,
}

impl NetSetup {
    pub fn build(&self, seed: u64) -> Result<MultiExitNetwork> {
        let mut rng = seeded_rng(seed);
        let bb = build_backbone(&self.backbone, &mut rng)?;
        let mut net = attach_exits(bb, &self.placement, &self.head, &mut rng)?;
        if self.gates {
            net.attach_gates(&mut rng);
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub label: String,
    pub seed: u64,
    /// Parameter hash before training; equal across labels for one seed.
    pub init_hash: String,
    /// Final-exit training loss after each epoch.
    pub losses: Vec<f64>,
    /// First epoch (1-based) whose loss is at or below the target, or
    /// `epochs + 1` when the target is never reached.
    pub epochs_to_target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub target_loss: f64,
    pub epochs: usize,
    pub records: Vec<ConvergenceRecord>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl ConvergenceReport {
    pub fn records_for<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a ConvergenceRecord> + 'a {
        self.records.iter().filter(move |r| r.label == label)
    }

    pub fn median_epochs(&self, label: &str) -> Option<f64> {
        let v: Vec<f64> = self.records_for(label).map(|r| r.epochs_to_target as f64).collect();
        (!v.is_empty()).then(|| median(v))
    }

    /// `epochs_to_target(label) / epochs_to_target(baseline)` for every seed
    /// both were run on.
    pub fn ratios(&self, label: &str, baseline: &str) -> Vec<(u64, f64)> {
        self.records_for(label)
            .filter_map(|r| {
                let b = self.records_for(baseline).find(|b| b.seed == r.seed)?;
                Some((r.seed, r.epochs_to_target as f64 / b.epochs_to_target as f64))
            })
            .collect()
    }

    /// Long format: `strategy,seed,iteration,loss`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["strategy", "seed", "iteration", "loss"])?;
        for r in &self.records {
            for (t, l) in r.losses.iter().enumerate() {
                w.write_record([r.label.clone(), r.seed.to_string(), (t + 1).to_string(), format!("{l:?}")])?;
            }
        }
        write_with_schema(path, "convergence", w)
    }
}

/// Trains every labeled configuration from the same initial parameters and
/// batch order per seed, recording the final-exit loss after each epoch.
pub fn convergence_compare(
    setup: &NetSetup,
    data: &Dataset,
    runs: &[(String, TrainingConfig)],
    target_loss: f64,
    seeds: &[u64],
) -> Result<ConvergenceReport> {
    let Some(epochs) = runs.first().map(|r| r.1.epochs) else {
        return Err(Error::Contract("no training configurations to compare".into()));
    };
    if runs.iter().any(|r| r.1.epochs != epochs) {
        return Err(Error::Config("compared runs must share the epoch count".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Contract("no seeds".into()));
    }
    if !target_loss.is_finite() {
        return Err(Error::Config(format!("target loss {target_loss} must be finite")));
    }
    let mut records = Vec::with_capacity(runs.len() * seeds.len());
    for &seed in seeds {
        let init = setup.build(seed)?;
        let init_hash = init.full_hash();
        let final_depth = init.depth();
        for (label, cfg) in runs {
            let mut net = init.clone();
            debug_assert_eq!(net.full_hash(), init_hash);
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let report = train(&mut net, data, &cfg)?;
            let losses = report.loss_curve(final_depth).expect("final exit is always recorded");
            if losses.len() != epochs {
                return Err(Error::Config(format!(
                    "{label} records {} epochs for {epochs} configured; use a single-phase strategy",
                    losses.len()
                )));
            }
            let epochs_to_target = losses
                .iter()
                .position(|&l| l <= target_loss)
                .map_or(epochs + 1, |t| t + 1);
            records.push(ConvergenceRecord {
                label: label.clone(),
                seed,
                init_hash: init_hash.clone(),
                losses,
                epochs_to_target,
            });
        }
    }
    Ok(ConvergenceReport {
        target_loss,
        epochs,
        records,
    })
}

/// Projects rows onto their first two principal directions when wider than two.
fn reduce(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.rows();
    let d = t.last_dim();
    if d <= 2 {
        return (0..d).map(|j| (0..n).map(|i| t.row(i)[j]).collect()).collect();
    }
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| t.row(i)[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| t.row(i)[j] - mean[j]);
    let cov = centered.transpose() * &centered / n.max(1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    order[..2]
        .iter()
        .map(|&k| {
            let v = eig.eigenvectors.column(k);
            (0..n).map(|i| centered.row(i).dot(&v.transpose())).collect()
        })
        .collect()
}

/// Equal-width bin index of every value; a column with (numerically) no
/// spread lands in a single bin.
fn bin_columns(cols: &[Vec<f64>], bins: usize, n: usize) -> Vec<Vec<usize>> {
    let ranges: Vec<(f64, f64)> = cols
        .iter()
        .map(|c| c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))))
        .collect();
    let scale = ranges.iter().map(|(lo, hi)| hi - lo).fold(1.0, f64::max);
    let mut codes = vec![Vec::with_capacity(cols.len()); n];
    for (c, &(lo, hi)) in cols.iter().zip(&ranges) {
        let width = hi - lo;
        for (i, &v) in c.iter().enumerate() {
            let b = if width <= 1e-9 * scale {
                0
            } else {
                (((v - lo) / width * bins as f64) as usize).min(bins - 1)
            };
            codes[i].push(b);
        }
    }
    codes
}

fn entropy_bits<K: Ord>(counts: &BTreeMap<K, usize>, n: usize) -> f64 {
    let n = n as f64;
    -counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Plug-in estimate of `I(A;B)` in bits from paired rows, after reducing
/// each side to at most two principal directions and binning every
/// direction into `bins` equal-width cells. Clamped at zero.
pub fn estimate_mutual_information(a: &Tensor, b: &Tensor, bins: usize) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::dim("mutual information samples", a.rows(), b.rows()));
    }
    if bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::Contract("no samples".into()));
    }
    let ca = bin_columns(&reduce(a), bins, n);
    let cb = bin_columns(&reduce(b), bins, n);
    let constant = |codes: &[Vec<usize>]| codes.iter().all(|c| c == &codes[0]);
    if constant(&ca) || constant(&cb) {
        return Ok(0.0);
    }
    let mut ha = BTreeMap::new();
    let mut hb = BTreeMap::new();
    let mut hab = BTreeMap::new();
    for (x, y) in ca.iter().zip(&cb) {
        *ha.entry(x).or_insert(0) += 1;
        *hb.entry(y).or_insert(0) += 1;
        *hab.entry((x, y)).or_insert(0) += 1;
    }
    let mi = entropy_bits(&ha, n) + entropy_bits(&hb, n) - entropy_bits(&hab, n);
    Ok(mi.max(0.0))
}

/// One exit embedding on the information plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbPoint {
    pub exit_depth: usize,
    /// `I(X;F)` in bits.
    pub i_x: f64,
    /// `I(Y;F)` in bits.
    pub i_y: f64,
    pub bins: usize,
    pub n: usize,
}

impl IbPoint {
    /// `I(X;F) − β·I(Y;F)`, the usual bottleneck Lagrangian. Reported only.
    pub fn lagrangian(&self, beta: f64) -> f64 {
        self.i_x - beta * self.i_y
    }
}

/// Labels as a one-column tensor.
pub fn label_tensor(y: &[usize]) -> Tensor {
    Tensor::new(vec![y.len(), 1], y.iter().map(|&c| c as f64).collect()).expect("shape")
}

/// Information-plane coordinates of every exit embedding, final exit last.
pub fn ib_plane(net: &MultiExitNetwork, x: &Tensor, y: &[usize], bins: usize) -> Result<Vec<IbPoint>> {
    if x.rows() != y.len() {
        return Err(Error::dim("labels", x.rows(), y.len()));
    }
    let trace = net.forward_all_exits(x)?;
    let yt = label_tensor(y);
    trace
        .exits
        .iter()
        .map(|r| {
            Ok(IbPoint {
                exit_depth: r.depth,
                i_x: estimate_mutual_information(x, &r.embedding, bins)?,
                i_y: estimate_mutual_information(&yt, &r.embedding, bins)?,
                bins,
                n: y.len(),
            })
        })
        .collect()
}

/// `exit,I_X,I_Y,bins,n`.
pub fn write_ib_csv(points: &[IbPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["exit", "I_X", "I_Y", "bins", "n"])?;
    for p in points {
        w.write_record([
            p.exit_depth.to_string(),
            format!("{:?}", p.i_x),
            format!("{:?}", p.i_y),
            p.bins.to_string(),
            p.n.to_string(),
        ])?;
    }
    write_with_schema(path, "ib-plane", w)
}
