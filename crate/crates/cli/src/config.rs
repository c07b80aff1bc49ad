//! Experiment configuration: one JSON document, validated before any work.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use multiexit::exitnet::{HeadSpec, Init};
use multiexit::inferkit::ExitPolicy;
use multiexit::tiersim::TierTopology;
use multiexit::trainkit::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Relative to the output root.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub placement: Option<PlacementSpec>,
    #[serde(default)]
    pub training: Option<TrainingConfig>,
    #[serde(default)]
    pub policy: Option<PolicySpec>,
    #[serde(default)]
    pub topology: Option<TopologySpec>,
    #[serde(default)]
    pub diagnostics: Option<DiagSpec>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("experiment")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Mixture {
        n: usize,
        easy_fraction: f64,
        classes: usize,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Widths of the hidden stages; the final stage maps to the classes.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub init: Init,
    #[serde(default)]
    pub head: HeadSpec,
    #[serde(default)]
    pub gates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    /// Epochs used to train the fully exited probe network.
    #[serde(default = "default_probe_epochs")]
    pub epochs: usize,
    /// Entropy threshold used to measure exit fractions on the probe.
    #[serde(default = "default_probe_beta")]
    pub beta: f64,
}

fn default_probe_epochs() -> usize {
    5
}

fn default_probe_beta() -> f64 {
    0.5
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            epochs: default_probe_epochs(),
            beta: default_probe_beta(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlacementSpec {
    Fixed {
        exits: Vec<usize>,
    },
    Greedy {
        th: f64,
        #[serde(default)]
        probe: ProbeSpec,
    },
    Exhaustive {
        max_exits: usize,
        #[serde(default)]
        probe: ProbeSpec,
    },
    Percentile {
        percentiles: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "calibration", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    /// One entropy threshold per exit on the validation split.
    PerExit {
        #[serde(default)]
        budget: f64,
    },
    /// One shared threshold tuned toward `final accuracy − target_drop`.
    Single {
        target_drop: f64,
        #[serde(default = "default_mu")]
        mu: f64,
        #[serde(default = "default_max_iters")]
        max_iters: usize,
    },
    Fixed {
        policy: ExitPolicy,
    },
}

fn default_mu() -> f64 {
    1.0
}

fn default_max_iters() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    /// The first candidate is simulated in detail; two or more are ranked.
    pub candidates: Vec<TierTopology>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagSpec {
    /// Bins per direction for the information plane; `None` skips it.
    #[serde(default = "default_bins")]
    pub ib_bins: Option<usize>,
    #[serde(default)]
    pub convergence: Option<ConvergenceSpec>,
}

fn default_bins() -> Option<usize> {
    Some(16)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSpec {
    pub target_loss: f64,
    pub seeds: Vec<u64>,
    pub runs: Vec<NamedRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedRun {
    pub label: String,
    pub training: TrainingConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("invalid experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Applies `--seed` and pushes the experiment seed into the training
    /// section, so the resolved document is what actually runs.
    pub fn resolve(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(t) = &mut self.training {
            t.seed = self.seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSpec::Mixture { n, easy_fraction, classes } => {
                if !(0.0..=1.0).contains(easy_fraction) {
                    bail!("dataset.easy_fraction {easy_fraction} outside [0, 1]");
                }
                if *classes < 2 || n < classes {
                    bail!("dataset needs at least 2 classes and n >= classes");
                }
            }
            DatasetSpec::Csv { path, .. } => {
                if path.as_os_str().is_empty() {
                    bail!("dataset.path is empty");
                }
            }
        }
        if let Some(m) = &self.model {
            if m.widths.contains(&0) {
                bail!("model.widths must be positive");
            }
        }
        let needs = |present: bool, section: &str, what: &str| -> Result<()> {
            if !present {
                bail!("section `{section}` requires `{what}`");
            }
            Ok(())
        };
        if self.placement.is_some() {
            needs(self.model.is_some(), "placement", "model")?;
        }
        if let Some(PlacementSpec::Greedy { .. } | PlacementSpec::Exhaustive { .. }) = &self.placement {
            needs(self.training.is_some(), "placement", "training")?;
        }
        if let Some(t) = &self.training {
            needs(self.placement.is_some(), "training", "placement")?;
            t.validate()?;
        }
        if self.policy.is_some() {
            needs(self.training.is_some(), "policy", "training")?;
        }
        if let Some(t) = &self.topology {
            needs(self.policy.is_some(), "topology", "policy")?;
            if t.candidates.is_empty() {
                bail!("topology.candidates is empty");
            }
        }
        if let Some(d) = &self.diagnostics {
            needs(self.training.is_some(), "diagnostics", "training")?;
            if let Some(c) = &d.convergence {
                if c.runs.is_empty() || c.seeds.is_empty() {
                    bail!("diagnostics.convergence needs runs and seeds");
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the resolved document in its canonical serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
