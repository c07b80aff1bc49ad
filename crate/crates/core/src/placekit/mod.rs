//! Cost profiles and early-exit placement rules.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::exitnet::{AuxiliaryHead, HeadSpec, ModelDescription, MultiExitNetwork};
use crate::inferkit::{run_adaptive_inference, ExitPolicy};
use crate::numcore::{argmax, seeded_rng, Tensor};
use crate::{Error, Result};

/// Largest depth accepted by [`exhaustive_placement`].
pub const EXHAUSTIVE_DEPTH_LIMIT: usize = 20;

/// Constant heads within this accuracy of an exit make it redundant.
pub const CONSTANT_HEAD_MARGIN: f64 = 0.005;

/// Per-depth costs of a backbone plus, once measured, the fraction of
/// samples reaching each depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    gamma_f: Vec<f64>,
    gamma_c: Vec<f64>,
    reach: Option<Vec<f64>>,
}

impl CostProfile {
    /// `gamma_f` has one entry per block, `gamma_c` one per candidate exit
    /// (every depth but the last).
    pub fn new(gamma_f: Vec<f64>, gamma_c: Vec<f64>) -> Result<Self> {
        if gamma_f.is_empty() {
            return Err(Error::Config("cost profile needs at least one block".into()));
        }
        if gamma_c.len() + 1 != gamma_f.len() {
            return Err(Error::dim("head costs", gamma_f.len() - 1, gamma_c.len()));
        }
        if let Some(bad) = gamma_f.iter().chain(&gamma_c).find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Config(format!("cost {bad} must be finite and nonnegative")));
        }
        Ok(Self {
            gamma_f,
            gamma_c,
            reach: None,
        })
    }

    /// Attaches reach fractions `I_1..I_L`: `I_1 = 1`, nonincreasing, in `[0, 1]`.
    pub fn with_reach(mut self, reach: Vec<f64>) -> Result<Self> {
        if reach.len() != self.depth() {
            return Err(Error::dim("reach fractions", self.depth(), reach.len()));
        }
        if reach.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("reach fractions must lie in [0, 1]".into()));
        }
        if (reach[0] - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("I_1 must be 1, got {}", reach[0])));
        }
        if reach.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            return Err(Error::Config("reach fractions must be nonincreasing".into()));
        }
        self.reach = Some(reach);
        Ok(self)
    }

    pub fn depth(&self) -> usize {
        self.gamma_f.len()
    }

    pub fn gamma_f(&self) -> &[f64] {
        &self.gamma_f
    }

    pub fn gamma_c(&self) -> &[f64] {
        &self.gamma_c
    }

    pub fn reach(&self) -> Option<&[f64]> {
        self.reach.as_deref()
    }

    /// Cumulative cost `γ_i` (1-based; `γ_0 = 0`).
    pub fn gamma(&self, i: usize) -> f64 {
        self.gamma_f[..i].iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.gamma(self.depth())
    }

    fn reach_or_err(&self) -> Result<&[f64]> {
        self.reach
            .as_deref()
            .ok_or_else(|| Error::Config("cost profile has no measured reach fractions".into()))
    }

    /// `I_i` for `i` in `1..=L`, and 0 past the end.
    fn reach_at(reach: &[f64], i: usize) -> f64 {
        reach.get(i - 1).copied().unwrap_or(0.0)
    }

    /// `cm_i = I_{i+1} / I_i`, taken as 1 when `I_i = 0`.
    pub fn compression(&self, i: usize) -> Result<f64> {
        let reach = self.reach_or_err()?;
        check_candidate(i, self.depth())?;
        let (a, b) = (reach[i - 1], reach[i]);
        Ok(if a == 0.0 { 1.0 } else { b / a })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["index", "gamma_f", "gamma_c", "I"])?;
        for i in 1..=self.depth() {
            let c = self.gamma_c.get(i - 1).map(|v| format!("{v:?}")).unwrap_or_default();
            let r = self.reach.as_ref().map(|r| format!("{:?}", r[i - 1])).unwrap_or_default();
            w.write_record([i.to_string(), format!("{:?}", self.gamma_f[i - 1]), c, r])?;
        }
        crate::data::write_with_schema(path, "cost-profile", w)
    }

    /// Reads `index,gamma_f,gamma_c,I`. The last row's `gamma_c` is ignored;
    /// `I` must be given on every row or on none.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let want = ["index", "gamma_f", "gamma_c", "I"];
        if headers.len() != want.len() || headers.iter().zip(want).any(|(h, w)| h != w) {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {}", want.join(",")),
            });
        }
        let mut rows: Vec<(usize, f64, Option<f64>, Option<f64>)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let bad = |message: String| Error::Parse { line, message };
            let index: usize = rec[0].parse().map_err(|_| bad(format!("bad index {:?}", &rec[0])))?;
            let num = |s: &str, what: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    return Ok(None);
                }
                match s.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(Some(v)),
                    _ => Err(bad(format!("bad {what} {s:?}"))),
                }
            };
            let gf = num(&rec[1], "gamma_f")?.ok_or_else(|| bad("missing gamma_f".into()))?;
            rows.push((index, gf, num(&rec[2], "gamma_c")?, num(&rec[3], "I")?));
        }
        for (k, r) in rows.iter().enumerate() {
            if r.0 != k + 1 {
                return Err(Error::Parse {
                    line: k + 2,
                    message: format!("expected index {}, got {}", k + 1, r.0),
                });
            }
        }
        let depth = rows.len();
        let gamma_f = rows.iter().map(|r| r.1).collect();
        let mut gamma_c = Vec::with_capacity(depth.saturating_sub(1));
        for (k, r) in rows.iter().take(depth.saturating_sub(1)).enumerate() {
            gamma_c.push(r.2.ok_or_else(|| Error::Parse {
                line: k + 2,
                message: "missing gamma_c".into(),
            })?);
        }
        let profile = Self::new(gamma_f, gamma_c)?;
        let reach: Vec<Option<f64>> = rows.iter().map(|r| r.3).collect();
        if reach.iter().all(Option::is_some) && !reach.is_empty() {
            profile.with_reach(reach.into_iter().flatten().collect())
        } else if reach.iter().all(Option::is_none) {
            Ok(profile)
        } else {
            Err(Error::Config("column I must be filled on every row or none".into()))
        }
    }
}

fn check_candidate(i: usize, depth: usize) -> Result<()> {
    if i == 0 || i >= depth {
        return Err(Error::Index {
            what: "candidate exit",
            index: i,
            len: depth.saturating_sub(1),
        });
    }
    Ok(())
}

/// MAC costs read off a model description. Depths without a head are priced
/// as the head `spec` would build there.
pub fn static_cost_profile(desc: &ModelDescription, spec: &HeadSpec) -> Result<CostProfile> {
    let gamma_f: Vec<f64> = desc
        .stages
        .iter()
        .map(|s| s.iter().map(|b| b.kind.macs(b.in_dim, b.out_dim)).sum::<u64>() as f64)
        .collect();
    let depth = gamma_f.len();
    let mut rng = seeded_rng(0);
    let mut gamma_c = Vec::with_capacity(depth.saturating_sub(1));
    for d in 1..depth {
        let cost = match desc.exits.iter().find(|e| e.attach == d) {
            Some(e) => e.head.iter().map(|b| b.kind.macs(b.in_dim, b.out_dim)).sum(),
            None => {
                let width = desc.stages[d - 1]
                    .last()
                    .ok_or_else(|| Error::Topology(format!("stage {d} is empty")))?
                    .out_dim;
                AuxiliaryHead::build(d, width, desc.classes, spec, &mut rng)?.macs()
            }
        };
        gamma_c.push(cost as f64);
    }
    CostProfile::new(gamma_f, gamma_c)
}

/// Fraction of samples reaching each depth `1..=L` under `policy`: a sample
/// reaches depth `d` unless it left at an exit shallower than `d`.
pub fn measure_exit_fractions(net: &MultiExitNetwork, policy: &ExitPolicy, x: &Tensor) -> Result<Vec<f64>> {
    let out = run_adaptive_inference(net, policy, x, None)?;
    Ok(reach_by_depth(&out.ledger.exit_depths, &out.ledger.exit_of, net.depth()))
}

pub(crate) fn reach_by_depth(exit_depths: &[usize], exit_of: &[usize], depth: usize) -> Vec<f64> {
    let n = exit_of.len() as f64;
    (1..=depth)
        .map(|d| exit_of.iter().filter(|&&e| exit_depths[e] >= d).count() as f64 / n)
        .collect()
}

/// Whether an exit after block `i` pays for itself:
/// `(γ_{i+1} − γ_i)(I_i − I_{i+1}) > γ_i·I_{i+1}`.
pub fn efficiency_test(profile: &CostProfile, i: usize) -> Result<bool> {
    let reach = profile.reach_or_err()?;
    check_candidate(i, profile.depth())?;
    let (g0, g1) = (profile.gamma(i), profile.gamma(i + 1));
    let (r0, r1) = (reach[i - 1], reach[i]);
    Ok((g1 - g0) * (r0 - r1) > g0 * r1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementDecision {
    pub index: usize,
    pub rule: String,
    /// Left-hand side of the rule; the exit is kept when it is `>= 0`.
    pub lhs: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub strategy: String,
    pub th: Option<f64>,
    pub exits: Vec<usize>,
    pub decisions: Vec<PlacementDecision>,
    /// Expected cost under the profile's reach fractions, when known.
    pub expected_cost: Option<f64>,
}

/// Greedy rule scanned from the input side: keep exit `i` iff
/// `(TH − cm_i)·γ_{f_{i+1}} − (1 − cm_i)·γ_{c_i} − (1 − TH)·γ_{f_i} ≥ 0`.
pub fn greedy_placement(profile: &CostProfile, th: f64) -> Result<PlacementPlan> {
    if !(0.0..=1.0).contains(&th) {
        return Err(Error::Config(format!("TH {th} outside [0, 1]")));
    }
    let mut decisions = Vec::with_capacity(profile.depth().saturating_sub(1));
    for i in 1..profile.depth() {
        let cm = profile.compression(i)?;
        let lhs = (th - cm) * profile.gamma_f[i] - (1.0 - cm) * profile.gamma_c[i - 1] - (1.0 - th) * profile.gamma_f[i - 1];
        decisions.push(PlacementDecision {
            index: i,
            rule: "greedy".into(),
            lhs,
            kept: lhs >= 0.0,
        });
    }
    let exits: Vec<usize> = decisions.iter().filter(|d| d.kept).map(|d| d.index).collect();
    Ok(PlacementPlan {
        strategy: "greedy".into(),
        th: Some(th),
        expected_cost: Some(expected_cost(profile, &exits)?),
        exits,
        decisions,
    })
}

/// Average cost of a network with exits at `exits` (increasing). A sample
/// that would have left anywhere in `(s_{j-1}, s_j]` leaves at `s_j`, so the
/// share arriving at `s_j` is `I_{s_{j-1}+1}` and the share continuing past
/// the last exit is `I_{s_k+1}`.
pub fn expected_cost(profile: &CostProfile, exits: &[usize]) -> Result<f64> {
    let reach = profile.reach_or_err()?;
    for &s in exits {
        check_candidate(s, profile.depth())?;
    }
    if exits.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Placement(format!("exits {exits:?} must be strictly increasing")));
    }
    let mut cost = 0.0;
    let mut prev = 0;
    for &s in exits {
        let arriving = CostProfile::reach_at(reach, prev + 1);
        cost += arriving * (profile.gamma(s) - profile.gamma(prev) + profile.gamma_c[s - 1]);
        prev = s;
    }
    cost += CostProfile::reach_at(reach, prev + 1) * (profile.total() - profile.gamma(prev));
    Ok(cost)
}

/// Cheapest exit set with at most `max_exits` members. Ties go to fewer
/// exits, then to the lexicographically smaller set.
pub fn exhaustive_placement(profile: &CostProfile, max_exits: usize) -> Result<PlacementPlan> {
    let depth = profile.depth();
    if depth > EXHAUSTIVE_DEPTH_LIMIT {
        return Err(Error::SearchTooLarge {
            depth,
            limit: EXHAUSTIVE_DEPTH_LIMIT,
        });
    }
    let candidates = depth.saturating_sub(1);
    let mut sets: Vec<Vec<usize>> = (0u32..(1u32 << candidates))
        .filter(|m| m.count_ones() as usize <= max_exits)
        .map(|m| (1..=candidates).filter(|i| m & (1 << (i - 1)) != 0).collect())
        .collect();
    sets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    let scale = profile.total().max(1.0);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for s in sets {
        let c = expected_cost(profile, &s)?;
        if best.as_ref().is_none_or(|(_, b)| c < b - 1e-12 * scale) {
            best = Some((s, c));
        }
    }
    let (exits, cost) = best.expect("the empty set is always a candidate");
    Ok(PlacementPlan {
        strategy: "exhaustive".into(),
        th: None,
        decisions: (1..=candidates)
            .map(|i| PlacementDecision {
                index: i,
                rule: "exhaustive".into(),
                lhs: if exits.contains(&i) { 0.0 } else { -1.0 },
                kept: exits.contains(&i),
            })
            .collect(),
        exits,
        expected_cost: Some(cost),
    })
}

/// For each `p`, the smallest `i < L` with `γ_i ≥ p·γ_L`; duplicates are
/// merged.
pub fn percentile_placement(profile: &CostProfile, percentiles: &[f64]) -> Result<PlacementPlan> {
    if percentiles.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::Config("percentiles must lie in (0, 1)".into()));
    }
    if percentiles.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("percentiles must be increasing".into()));
    }
    let total = profile.total();
    let mut exits: Vec<usize> = Vec::new();
    let mut decisions = Vec::new();
    for &p in percentiles {
        let target = p * total - 1e-12 * total;
        let i = (1..=profile.depth())
            .find(|&i| profile.gamma(i) >= target)
            .unwrap_or(profile.depth());
        let kept = i < profile.depth() && !exits.contains(&i);
        if kept {
            exits.push(i);
        }
        decisions.push(PlacementDecision {
            index: i,
            rule: format!("percentile {p}"),
            lhs: profile.gamma(i) - p * total,
            kept,
        });
    }
    let expected_cost = profile.reach().map(|_| expected_cost(profile, &exits)).transpose()?;
    Ok(PlacementPlan {
        strategy: "percentile".into(),
        th: None,
        exits,
        decisions,
        expected_cost,
    })
}

/// Exit depths whose head is no better than always predicting the majority
/// class, within [`CONSTANT_HEAD_MARGIN`].
pub fn constant_head_redundant(net: &MultiExitNetwork, x: &Tensor, y: &[usize]) -> Result<Vec<usize>> {
    if y.is_empty() {
        return Err(Error::Contract("constant-head test needs labeled data".into()));
    }
    let mut counts = vec![0usize; net.classes()];
    for &c in y {
        counts[c] += 1;
    }
    let constant = *counts.iter().max().expect("classes >= 2") as f64 / y.len() as f64;
    let trace = net.forward_all_exits(x)?;
    let mut out = Vec::new();
    for r in &trace.exits[..trace.exits.len() - 1] {
        let hits = (0..y.len()).filter(|&i| argmax(r.prediction.row(i)) == y[i]).count();
        if constant >= hits as f64 / y.len() as f64 - CONSTANT_HEAD_MARGIN {
            out.push(r.depth);
        }
    }
    Ok(out)
}
