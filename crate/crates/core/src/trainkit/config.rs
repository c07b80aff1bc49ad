use serde::{Deserialize, Serialize};

use crate::exitnet::CombinationMode;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Final loss only; the heads are ignored.
    Standard,
    Joint,
    CombinedOutput,
    GatedRecursive,
    Layerwise,
    Separate,
    Freezeout,
    CostRegularized,
    LocalFeedback,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Standard,
        Strategy::Joint,
        Strategy::CombinedOutput,
        Strategy::GatedRecursive,
        Strategy::Layerwise,
        Strategy::Separate,
        Strategy::Freezeout,
        Strategy::CostRegularized,
        Strategy::LocalFeedback,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::Joint => "joint",
            Strategy::CombinedOutput => "combined_output",
            Strategy::GatedRecursive => "gated_recursive",
            Strategy::Layerwise => "layerwise",
            Strategy::Separate => "separate",
            Strategy::Freezeout => "freezeout",
            Strategy::CostRegularized => "cost_regularized",
            Strategy::LocalFeedback => "local_feedback",
        }
    }

    /// Whether the strategy needs a gate at every exit.
    pub fn uses_gates(self) -> bool {
        matches!(self, Strategy::GatedRecursive | Strategy::CostRegularized)
    }
}

/// Weights of the auxiliary losses in the joint objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ExitWeights {
    Uniform { value: f64 },
    /// `α_i = base · i / K` for the `i`-th of `K` early exits.
    Linear { base: f64 },
    Explicit { values: Vec<f64> },
}

impl Default for ExitWeights {
    fn default() -> Self {
        ExitWeights::Uniform { value: 0.3 }
    }
}

impl ExitWeights {
    pub fn resolve(&self, exits: usize) -> Result<Vec<f64>> {
        let w = match self {
            ExitWeights::Uniform { value } => vec![*value; exits],
            ExitWeights::Linear { base } => (1..=exits)
                .map(|i| base * i as f64 / exits as f64)
                .collect(),
            ExitWeights::Explicit { values } => {
                if values.len() != exits {
                    return Err(Error::Config(format!(
                        "{} exit weights given for {exits} exits",
                        values.len()
                    )));
                }
                values.clone()
            }
        };
        if let Some(bad) = w.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(Error::Config(format!("exit weight {bad} must be finite and nonnegative")));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinationConfig {
    pub mode: CombinationMode,
    /// Initial weights (raw logits in softmax mode), early exits first.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// Reject fixed weights that are not a convex combination.
    #[serde(default)]
    pub require_convex: bool,
}

impl Default for CombinationConfig {
    fn default() -> Self {
        Self {
            mode: CombinationMode::SoftmaxNormalized,
            weights: None,
            require_convex: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub strategy: Strategy,
    /// `T`, in epochs.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-stage base rates `η_i(0)`; heads follow the stage they attach to.
    #[serde(default)]
    pub stage_learning_rates: Option<Vec<f64>>,
    #[serde(default)]
    pub exit_weights: ExitWeights,
    #[serde(default)]
    pub combination: CombinationConfig,
    /// Freezing points `t_i` in epochs, one per stage.
    #[serde(default)]
    pub freezeout_points: Option<Vec<f64>>,
    /// `ε_j` per exit, early exits first, final exit last.
    #[serde(default)]
    pub cost_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub cost_strength: f64,
    #[serde(default)]
    pub seed: u64,
    /// Off by default so that reruns produce identical metric files.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl TrainingConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.1,
            stage_learning_rates: None,
            exit_weights: ExitWeights::default(),
            combination: CombinationConfig::default(),
            freezeout_points: None,
            cost_weights: None,
            cost_strength: 0.0,
            seed: 0,
            record_wall_time: false,
        }
    }

    /// Checks the fields that do not depend on a network.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        check_rate(self.learning_rate)?;
        if let Some(r) = &self.stage_learning_rates {
            r.iter().try_for_each(|&v| check_rate(v))?;
        }
        if !(self.cost_strength.is_finite() && self.cost_strength >= 0.0) {
            return Err(Error::Config(format!(
                "cost_strength {} must be finite and nonnegative",
                self.cost_strength
            )));
        }
        if let Some(eps) = &self.cost_weights {
            if let Some(bad) = eps.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
                return Err(Error::Config(format!("cost weight {bad} must be positive")));
            }
        }
        if let Some(pts) = &self.freezeout_points {
            check_freezeout_points(pts, self.epochs)?;
        }
        Ok(())
    }

    /// `η_d(0)` for stage `depth` (1-based).
    pub fn stage_rate(&self, depth: usize) -> f64 {
        self.stage_learning_rates
            .as_ref()
            .and_then(|r| r.get(depth - 1).copied())
            .unwrap_or(self.learning_rate)
    }

    /// Configured freezing points, or `t_i = i·T/L`.
    pub fn resolved_freezeout_points(&self, depth: usize) -> Result<Vec<f64>> {
        match &self.freezeout_points {
            Some(p) if p.len() != depth => Err(Error::Config(format!(
                "{} freezing points given for {depth} stages",
                p.len()
            ))),
            Some(p) => Ok(p.clone()),
            None => Ok(equispaced_freezeout_points(depth, self.epochs as f64)),
        }
    }
}

fn check_rate(v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("learning rate {v} must be finite and nonnegative")))
    }
}

fn check_freezeout_points(pts: &[f64], epochs: usize) -> Result<()> {
    if pts.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::Config("freezing points must be positive".into()));
    }
    if pts.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("freezing points must be nondecreasing".into()));
    }
    if pts.last().is_some_and(|&t| t > epochs as f64) {
        return Err(Error::Config(format!("last freezing point exceeds T = {epochs}")));
    }
    Ok(())
}

/// `t_i = i·T/L` for `i = 1..=L`.
pub fn equispaced_freezeout_points(depth: usize, total: f64) -> Vec<f64> {
    (1..=depth).map(|i| i as f64 * total / depth as f64).collect()
}

/// Cosine-annealed rate that reaches zero at `t_i` and stays there.
pub fn freezeout_lr(eta0: f64, t: f64, t_i: f64) -> f64 {
    if t < t_i {
        0.5 * eta0 * (1.0 + (std::f64::consts::PI * t / t_i).cos())
    } else {
        0.0
    }
}

/// Rate of stage `stage` (1-based) at iteration `t` (in epochs) under `cfg`.
pub fn freezeout_schedule(stage: usize, t: f64, depth: usize, cfg: &TrainingConfig) -> Result<f64> {
    if stage == 0 || stage > depth {
        return Err(Error::Index {
            what: "stage",
            index: stage,
            len: depth,
        });
    }
    let pts = cfg.resolved_freezeout_points(depth)?;
    Ok(freezeout_lr(cfg.stage_rate(stage), t, pts[stage - 1]))
}
