//! Trace-driven latency simulation of a multi-exit network split across
//! computation tiers (device, edge, cloud, ...).
//!
//! Each stage runs on one tier and heads run on the tier of the stage they
//! attach to. A sample starts at tier 0 with its raw input; whenever the next
//! stage lives on a later tier, the current embedding crosses every link in
//! between. Samples are simulated one after another with no queueing.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_with_schema;
use crate::exitnet::{ModelDescription, MultiExitNetwork};
use crate::inferkit::{run_adaptive_inference, CostLedger, ExitPolicy};
use crate::numcore::Tensor;
use crate::{Error, Result};


/// Costs and shapes the simulator needs from a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimModel {
    pub input_dim: usize,
    /// MACs of stage `d`, stored at `d - 1`.
    pub stage_macs: Vec<f64>,
    /// Width of the embedding leaving each stage.
    pub stage_out_dim: Vec<usize>,
    /// Head MACs keyed by attach depth.
    pub head_macs: BTreeMap<usize, f64>,
}

impl SimModel {
    pub fn from_network(net: &MultiExitNetwork) -> Self {
        Self {
            input_dim: net.input_dim(),
            stage_macs: net.stages().iter().map(|s| s.macs() as f64).collect(),
            stage_out_dim: net.stages().iter().map(|s| s.out_dim()).collect(),
            head_macs: net.heads().iter().map(|h| (h.attach(), h.macs() as f64)).collect(),
        }
    }

    pub fn from_description(desc: &ModelDescription) -> Result<Self> {
        let mut stage_out_dim = Vec::with_capacity(desc.stages.len());
        for (d, s) in desc.stages.iter().enumerate() {
            let last = s
                .last()
                .ok_or_else(|| Error::Config(format!("stage {} has no blocks", d + 1)))?;
            stage_out_dim.push(last.out_dim);
        }
        let macs = |blocks: &[crate::exitnet::BlockDesc]| -> f64 {
            blocks.iter().map(|b| b.kind.macs(b.in_dim, b.out_dim)).sum::<u64>() as f64
        };
        Ok(Self {
            input_dim: desc.input_dim,
            stage_macs: desc.stages.iter().map(|s| macs(s)).collect(),
            stage_out_dim,
            head_macs: desc.exits.iter().map(|e| (e.attach, macs(&e.head))).collect(),
        })
    }

    pub fn depth(&self) -> usize {
        self.stage_macs.len()
    }

    fn check(&self) -> Result<()> {
        if self.stage_macs.is_empty() || self.stage_out_dim.len() != self.stage_macs.len() {
            return Err(Error::Config("simulation model needs one width per stage".into()));
        }
        if let Some(bad) = self
            .stage_macs
            .iter()
            .chain(self.head_macs.values())
            .find(|c| !(c.is_finite() && **c >= 0.0))
        {
            return Err(Error::Config(format!("MAC count {bad} must be finite and nonnegative")));
        }
        Ok(())
    }

    /// Values leaving stage `d`; `d = 0` is the raw input.
    fn boundary_dim(&self, d: usize) -> usize {
        if d == 0 {
            self.input_dim
        } else {
            self.stage_out_dim[d - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tier {
    pub name: String,
    /// MACs per millisecond.
    pub compute_rate: f64,
    #[serde(default = "one")]
    pub energy_per_mac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub latency_ms: f64,
    /// Bytes per millisecond; absent means transfers are instantaneous.
    #[serde(default)]
    pub bandwidth: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn four() -> f64 {
    4.0
}

/// Tiers in order, the links between consecutive tiers, and the tier each
/// stage runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierTopology {
    pub tiers: Vec<Tier>,
    pub links: Vec<Link>,
    /// Tier of stage `d`, stored at `d - 1`.
    pub partition: Vec<usize>,
    #[serde(default = "four")]
    pub bytes_per_value: f64,
}

impl TierTopology {
    /// Every stage on a single tier.
    pub fn single(rate: f64, depth: usize) -> Self {
        Self {
            tiers: vec![Tier {
                name: "local".into(),
                compute_rate: rate,
                energy_per_mac: 1.0,
            }],
            links: Vec::new(),
            partition: vec![0; depth],
            bytes_per_value: 4.0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        Ok(serde_json::from_reader(reader)?)
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        let err = |m: String| Err(Error::Topology(m));
        if self.tiers.is_empty() {
            return err("no tiers".into());
        }
        if self.links.len() + 1 != self.tiers.len() {
            return err(format!(
                "{} tiers need {} links, got {}",
                self.tiers.len(),
                self.tiers.len() - 1,
                self.links.len()
            ));
        }
        for t in &self.tiers {
            if !(t.compute_rate.is_finite() && t.compute_rate > 0.0) {
                return err(format!("tier {:?} has non-positive rate {}", t.name, t.compute_rate));
            }
            if !(t.energy_per_mac.is_finite() && t.energy_per_mac >= 0.0) {
                return err(format!("tier {:?} has invalid energy coefficient", t.name));
            }
        }
        for (i, l) in self.links.iter().enumerate() {
            if !(l.latency_ms.is_finite() && l.latency_ms >= 0.0) {
                return err(format!("link {i} has invalid latency {}", l.latency_ms));
            }
            if let Some(b) = l.bandwidth {
                if !(b > 0.0) {
                    return err(format!("link {i} has non-positive bandwidth {b}"));
                }
            }
        }
        if !(self.bytes_per_value.is_finite() && self.bytes_per_value > 0.0) {
            return err("bytes_per_value must be positive".into());
        }
        if self.partition.len() != depth {
            return err(format!(
                "partition assigns {} of {depth} stages",
                self.partition.len()
            ));
        }
        if let Some(&t) = self.partition.iter().find(|&&t| t >= self.tiers.len()) {
            return err(format!("partition names tier {t} of {}", self.tiers.len()));
        }
        if self.partition.windows(2).any(|w| w[1] < w[0]) {
            return err(format!("partition {:?} moves back to an earlier tier", self.partition));
        }
        Ok(())
    }

    /// Milliseconds to push `values` across link `i`.
    pub fn transfer_ms(&self, i: usize, values: usize) -> f64 {
        let l = &self.links[i];
        let wire = match l.bandwidth {
            Some(b) => values as f64 * self.bytes_per_value / b,
            None => 0.0,
        };
        l.latency_ms + wire
    }
}

/// Per-sample exit decisions, detached from the network that made them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitLog {
    /// Early exits first, final depth last.
    pub exit_depths: Vec<usize>,
    /// Whether the head at each exit runs when a sample reaches it.
    pub consulted: Vec<bool>,
    /// Exit position of every sample.
    pub exit_of: Vec<usize>,
}

impl ExitLog {
    pub fn from_ledger(ledger: &CostLedger) -> Self {
        Self {
            exit_depths: ledger.exit_depths.clone(),
            consulted: ledger.consulted.clone(),
            exit_of: ledger.exit_of.clone(),
        }
    }

    /// Every sample leaves at the final exit and no head runs.
    pub fn full_depth(exit_depths: Vec<usize>, samples: usize) -> Self {
        let k = exit_depths.len();
        Self {
            consulted: vec![false; k],
            exit_depths,
            exit_of: vec![k - 1; samples],
        }
    }

    pub fn len(&self) -> usize {
        self.exit_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exit_of.is_empty()
    }

    fn check(&self, model: &SimModel) -> Result<()> {
        let k = self.exit_depths.len();
        if k == 0 || self.consulted.len() != k {
            return Err(Error::dim("exit log consulted flags", k, self.consulted.len()));
        }
        if self.exit_depths.last() != Some(&model.depth()) {
            return Err(Error::Config(format!(
                "exit log ends at depth {:?}, model depth is {}",
                self.exit_depths.last(),
                model.depth()
            )));
        }
        if self.exit_depths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("exit depths must increase".into()));
        }
        for (&d, &c) in self.exit_depths.iter().zip(&self.consulted) {
            if c && d != model.depth() && !model.head_macs.contains_key(&d) {
                return Err(Error::Config(format!("no head at consulted depth {d}")));
            }
        }
        if let Some(&e) = self.exit_of.iter().find(|&&e| e >= k) {
            return Err(Error::Index {
                what: "exit position",
                index: e,
                len: k,
            });
        }
        Ok(())
    }

    /// One row per sample: `sample,exit_depth,consulted` where `consulted`
    /// lists the head depths the sample ran, separated by `;`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sample", "exit_depth", "consulted"])?;
        for (i, &e) in self.exit_of.iter().enumerate() {
            let ran: Vec<String> = (0..=e)
                .filter(|&j| self.consulted[j])
                .map(|j| self.exit_depths[j].to_string())
                .collect();
            w.write_record([i.to_string(), self.exit_depths[e].to_string(), ran.join(";")])?;
        }
        write_with_schema(path, "exit-log", w)
    }

    /// Reads the per-sample log back. `exit_depths` must list every exit of
    /// the network, final depth last.
    pub fn read_csv<R: Read>(reader: R, exit_depths: &[usize]) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["sample", "exit_depth", "consulted"] {
            return Err(Error::Parse {
                line: 1,
                message: "expected header sample,exit_depth,consulted".into(),
            });
        }
        let pos: BTreeMap<usize, usize> = exit_depths.iter().enumerate().map(|(j, &d)| (d, j)).collect();
        let mut consulted = vec![false; exit_depths.len()];
        let mut exit_of = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let bad = |message: String| Error::Parse { line, message };
            let sample: usize = rec[0].parse().map_err(|_| bad(format!("bad sample id {:?}", &rec[0])))?;
            if sample != exit_of.len() {
                return Err(bad(format!("expected sample {}, got {sample}", exit_of.len())));
            }
            let depth: usize = rec[1].parse().map_err(|_| bad(format!("bad exit depth {:?}", &rec[1])))?;
            let &e = pos.get(&depth).ok_or_else(|| bad(format!("depth {depth} is not an exit")))?;
            for d in rec[2].split(';').filter(|s| !s.is_empty()) {
                let d: usize = d.parse().map_err(|_| bad(format!("bad consulted depth {d:?}")))?;
                match pos.get(&d) {
                    Some(&j) if j <= e => consulted[j] = true,
                    _ => return Err(bad(format!("consulted depth {d} not on the path to {depth}"))),
                }
            }
            exit_of.push(e);
        }
        Ok(Self {
            exit_depths: exit_depths.to_vec(),
            consulted,
            exit_of,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierUsage {
    pub name: String,
    pub busy_ms: f64,
    /// Busy time over the summed latency of all samples.
    pub utilization: f64,
    pub macs: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkUsage {
    pub crossings: usize,
    /// Embedding values carried, not bytes.
    pub values: usize,
    pub busy_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub exit_depths: Vec<usize>,
    pub exit_of: Vec<usize>,
    pub latency_ms: Vec<f64>,
    /// Share of each sample's latency spent on links.
    pub link_ms: Vec<f64>,
    pub tiers: Vec<TierUsage>,
    pub links: Vec<LinkUsage>,
    /// Latency of a sample leaving at each exit, communication included.
    pub epsilon_ms: Vec<f64>,
    pub mean_latency_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
}

impl SimReport {
    /// Expected latency from exit fractions and `epsilon_ms`.
    pub fn mean_cost(&self) -> f64 {
        let n = self.exit_of.len() as f64;
        self.exit_of.iter().map(|&e| self.epsilon_ms[e]).sum::<f64>() / n
    }

    pub fn total_latency_ms(&self) -> f64 {
        self.latency_ms.iter().sum()
    }

    /// One row per sample: id, exit depth, latency and link time.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sample", "exit_depth", "latency_ms", "link_ms"])?;
        for (i, &e) in self.exit_of.iter().enumerate() {
            w.write_record([
                i.to_string(),
                self.exit_depths[e].to_string(),
                format!("{:?}", self.latency_ms[i]),
                format!("{:?}", self.link_ms[i]),
            ])?;
        }
        write_with_schema(path, "sim-samples", w)
    }
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Cost breakdown of a sample that leaves at exit `e`.
struct Route {
    compute_ms: Vec<f64>,
    macs: Vec<f64>,
    link_ms: Vec<f64>,
    link_values: Vec<usize>,
}

fn walk(model: &SimModel, topo: &TierTopology, log: &ExitLog, e: usize) -> Route {
    let t = topo.tiers.len();
    let mut p = Route {
        compute_ms: vec![0.0; t],
        macs: vec![0.0; t],
        link_ms: vec![0.0; t - 1],
        link_values: vec![0; t - 1],
    };
    let mut here = 0;
    let depth = log.exit_depths[e];
    for d in 1..=depth {
        let tier = topo.partition[d - 1];
        while here < tier {
            let values = model.boundary_dim(d - 1);
            p.link_ms[here] += topo.transfer_ms(here, values);
            p.link_values[here] += values;
            here += 1;
        }
        let rate = topo.tiers[tier].compute_rate;
        let mut macs = model.stage_macs[d - 1];
        if let Some(j) = log.exit_depths[..=e].iter().position(|&x| x == d) {
            if log.consulted[j] && d != model.depth() {
                macs += model.head_macs[&d];
            }
        }
        p.compute_ms[tier] += macs / rate;
        p.macs[tier] += macs;
    }
    p
}

/// Replays `log` on `topology`.
pub fn simulate(model: &SimModel, topology: &TierTopology, log: &ExitLog) -> Result<SimReport> {
    model.check()?;
    topology.validate(model.depth())?;
    log.check(model)?;
    if log.is_empty() {
        return Err(Error::Contract("exit log has no samples".into()));
    }
    let paths: Vec<Route> = (0..log.exit_depths.len()).map(|e| walk(model, topology, log, e)).collect();
    let epsilon_ms: Vec<f64> = paths
        .iter()
        .map(|p| p.compute_ms.iter().sum::<f64>() + p.link_ms.iter().sum::<f64>())
        .collect();
    let nt = topology.tiers.len();
    let mut busy = vec![0.0; nt];
    let mut macs = vec![0.0; nt];
    let mut links: Vec<LinkUsage> = (0..nt - 1)
        .map(|_| LinkUsage {
            crossings: 0,
            values: 0,
            busy_ms: 0.0,
        })
        .collect();
    let mut latency_ms = Vec::with_capacity(log.len());
    let mut link_ms = Vec::with_capacity(log.len());
    for &e in &log.exit_of {
        let p = &paths[e];
        for t in 0..nt {
            busy[t] += p.compute_ms[t];
            macs[t] += p.macs[t];
        }
        for (i, l) in links.iter_mut().enumerate() {
            if p.link_values[i] > 0 || p.link_ms[i] > 0.0 {
                l.crossings += 1;
            }
            l.values += p.link_values[i];
            l.busy_ms += p.link_ms[i];
        }
        latency_ms.push(epsilon_ms[e]);
        link_ms.push(p.link_ms.iter().sum());
    }
    let total: f64 = latency_ms.iter().sum();
    let tiers = topology
        .tiers
        .iter()
        .enumerate()
        .map(|(t, tier)| TierUsage {
            name: tier.name.clone(),
            busy_ms: busy[t],
            utilization: if total > 0.0 { busy[t] / total } else { 0.0 },
            macs: macs[t],
            energy: macs[t] * tier.energy_per_mac,
        })
        .collect();
    let mut sorted = latency_ms.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(SimReport {
        exit_depths: log.exit_depths.clone(),
        exit_of: log.exit_of.clone(),
        mean_latency_ms: total / log.len() as f64,
        p50_ms: percentile(&sorted, 0.50),
        p95_ms: percentile(&sorted, 0.95),
        p99_ms: percentile(&sorted, 0.99),
        latency_ms,
        link_ms,
        tiers,
        links,
        epsilon_ms,
    })
}

/// Runs the policy on `x` and replays the resulting decisions.
pub fn simulate_live(
    net: &MultiExitNetwork,
    topology: &TierTopology,
    policy: &ExitPolicy,
    x: &Tensor,
) -> Result<SimReport> {
    let out = run_adaptive_inference(net, policy, x, None)?;
    simulate(&SimModel::from_network(net), topology, &ExitLog::from_ledger(&out.ledger))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPartition {
    /// Position among the candidates given.
    pub candidate: usize,
    pub rank: usize,
    pub report: SimReport,
}

/// Simulates every candidate on the same log, best first: lowest mean
/// latency, then lowest p95, then candidate order.
pub fn compare_partitions(model: &SimModel, candidates: &[TierTopology], log: &ExitLog) -> Result<Vec<RankedPartition>> {
    if candidates.len() < 2 {
        return Err(Error::Contract("need at least two candidate topologies".into()));
    }
    let mut out: Vec<RankedPartition> = candidates
        .iter()
        .enumerate()
        .map(|(i, t)| {
            Ok(RankedPartition {
                candidate: i,
                rank: 0,
                report: simulate(model, t, log)?,
            })
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| {
        a.report
            .mean_latency_ms
            .total_cmp(&b.report.mean_latency_ms)
            .then(a.report.p95_ms.total_cmp(&b.report.p95_ms))
            .then(a.candidate.cmp(&b.candidate))
    });
    for (r, c) in out.iter_mut().enumerate() {
        c.rank = r + 1;
    }
    Ok(out)
}

/// Writes the ranking as `candidate,rank,mean_latency_ms,p95_ms`.
pub fn write_ranking_csv(ranking: &[RankedPartition], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["candidate", "rank", "mean_latency_ms", "p95_ms", "p99_ms"])?;
    for r in ranking {
        w.write_record([
            r.candidate.to_string(),
            r.rank.to_string(),
            format!("{:?}", r.report.mean_latency_ms),
            format!("{:?}", r.report.p95_ms),
            format!("{:?}", r.report.p99_ms),
        ])?;
    }
    write_with_schema(path, "partition-ranking", w)
}
