//! Pipeline stages. Each stage reads what earlier stages left in the output
//! directory, writes its own artifacts and a `<stage>.manifest.json`.

use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use multiexit::data::{generate_mixture_dataset, load_tabular_dataset, read_tabular, schema_comment, Dataset, Split};
use multiexit::diagkit::{convergence_compare, ib_plane, write_ib_csv, NetSetup};
use multiexit::exitnet::{attach_exits, build_backbone, BackboneSpec, MultiExitNetwork};
use multiexit::inferkit::{
    calibrate_single_threshold, calibrate_thresholds_per_exit, overthinking_report, run_adaptive_inference,
    ExitPolicy,
};
use multiexit::numcore::{derive_seed, seeded_rng};
use multiexit::placekit::{
    exhaustive_placement, greedy_placement, measure_exit_fractions, percentile_placement, static_cost_profile,
    PlacementPlan,
};
use multiexit::tiersim::{compare_partitions, simulate, write_ranking_csv, ExitLog, SimModel};
use multiexit::trainkit::{exit_metrics, train, Strategy, TrainingConfig};

use crate::config::{DatasetSpec, ExperimentConfig, ModelSpec, PlacementSpec, PolicySpec};

const MODEL_STREAM: u64 = 1;
const PROBE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Gen,
    Place,
    Train,
    Calibrate,
    Infer,
    Simulate,
    Diag,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Place => "place",
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Infer => "infer",
            Stage::Simulate => "simulate",
            Stage::Diag => "diag",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    pub artifacts: Vec<String>,
    /// The resolved configuration, defaults included.
    pub config: ExperimentConfig,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Versions {
    pub multiexit: String,
    pub multiexit_cli: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetInfo {
    classes: usize,
    dim: usize,
    train: usize,
    validation: usize,
    test: usize,
}

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, root: &Path) -> Self {
        let dir = root.join(&cfg.output_dir);
        Self { cfg, dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(self.path(name), text).with_context(|| format!("writing {name}"))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        let p = self.path(name);
        let text = std::fs::read_to_string(&p)
            .with_context(|| format!("reading {}; run the earlier stages first", p.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn model_spec(&self) -> Result<&ModelSpec> {
        self.cfg.model.as_ref().context("config has no `model` section")
    }

    fn training(&self) -> Result<&TrainingConfig> {
        self.cfg.training.as_ref().context("config has no `training` section")
    }

    fn split(&self) -> Result<Split> {
        let info: DatasetInfo = self.read_json("dataset.json")?;
        let load = |part: &str| -> Result<Dataset> {
            let name = format!("dataset_{part}.csv");
            let f = File::open(self.path(&name)).with_context(|| format!("opening {name}"))?;
            Ok(read_tabular(f, Some(info.classes)).with_context(|| format!("parsing {name}"))?)
        };
        Ok(Split {
            train: load("train")?,
            validation: load("validation")?,
            test: load("test")?,
        })
    }

    fn backbone(&self, split: &Split) -> Result<BackboneSpec> {
        let m = self.model_spec()?;
        Ok(BackboneSpec {
            input_dim: split.train.dim(),
            widths: m.widths.clone(),
            classes: split.train.classes,
            init: m.init,
        })
    }

    fn build(&self, split: &Split, exits: &[usize], stream: u64, gates: bool) -> Result<MultiExitNetwork> {
        let mut rng = seeded_rng(derive_seed(self.cfg.seed, stream));
        let bb = build_backbone(&self.backbone(split)?, &mut rng)?;
        let mut net = attach_exits(bb, exits, &self.model_spec()?.head, &mut rng)?;
        if gates {
            net.attach_gates(&mut rng);
        }
        Ok(net)
    }

    fn load_model(&self) -> Result<MultiExitNetwork> {
        let p = self.path("model.json");
        MultiExitNetwork::load(&p).with_context(|| format!("loading {}; run `train` first", p.display()))
    }

    fn policy(&self) -> Result<ExitPolicy> {
        #[derive(Deserialize)]
        struct Saved {
            policy: ExitPolicy,
        }
        Ok(self.read_json::<Saved>("calibration.json")?.policy)
    }

    /// Runs one stage and writes its manifest. Failures name the stage.
    pub fn run_stage(&self, stage: Stage) -> Result<Vec<String>> {
        std::fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        let artifacts = match stage {
            Stage::Gen => self.gen(),
            Stage::Place => self.place(),
            Stage::Train => self.train(),
            Stage::Calibrate => self.calibrate(),
            Stage::Infer => self.infer(),
            Stage::Simulate => self.simulate(),
            Stage::Diag => self.diag(),
        }
        .with_context(|| format!("stage `{}` failed", stage.name()))?;
        let manifest = Manifest {
            stage: stage.name().into(),
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            versions: Versions {
                multiexit: multiexit::VERSION.into(),
                multiexit_cli: env!("CARGO_PKG_VERSION").into(),
            },
            artifacts: artifacts.clone(),
            config: self.cfg.clone(),
        };
        self.write_json(&format!("{}.manifest.json", stage.name()), &manifest)?;
        Ok(artifacts)
    }

    /// Every stage the configuration enables, in pipeline order.
    pub fn enabled_stages(&self) -> Vec<Stage> {
        let c = &self.cfg;
        let mut v = vec![Stage::Gen];
        if c.placement.is_some() {
            v.push(Stage::Place);
        }
        if c.training.is_some() {
            v.push(Stage::Train);
        }
        if c.policy.is_some() {
            v.extend([Stage::Calibrate, Stage::Infer]);
        }
        if c.topology.is_some() {
            v.push(Stage::Simulate);
        }
        if c.diagnostics.is_some() {
            v.push(Stage::Diag);
        }
        v
    }

    fn gen(&self) -> Result<Vec<String>> {
        let seed = self.cfg.seed;
        let split = match &self.cfg.dataset {
            DatasetSpec::Mixture { n, easy_fraction, classes } => {
                generate_mixture_dataset(*n, *easy_fraction, *classes, seed)?.split_70_15_15(seed)
            }
            DatasetSpec::Csv { path, classes } => load_tabular_dataset(path, *classes, seed)?,
        };
        let mut out = Vec::new();
        for (part, ds) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
            let name = format!("dataset_{part}.csv");
            ds.write_csv(&self.path(&name))?;
            out.push(name);
        }
        let info = DatasetInfo {
            classes: split.train.classes,
            dim: split.train.dim(),
            train: split.train.len(),
            validation: split.validation.len(),
            test: split.test.len(),
        };
        self.write_json("dataset.json", &info)?;
        out.push("dataset.json".into());
        Ok(out)
    }

    fn place(&self) -> Result<Vec<String>> {
        let spec = self.cfg.placement.as_ref().context("config has no `placement` section")?;
        let split = self.split()?;
        let depth = self.model_spec()?.widths.len() + 1;
        let all: Vec<usize> = (1..depth).collect();
        let skeleton = self.build(&split, &all, PROBE_STREAM, false)?;
        let mut profile = static_cost_profile(&skeleton.describe("unsaved"), &self.model_spec()?.head)?;
        let probe = |epochs: usize, beta: f64| -> Result<Vec<f64>> {
            let mut net = skeleton.clone();
            let mut cfg = self.training()?.clone();
            cfg.strategy = Strategy::Joint;
            cfg.epochs = epochs;
            train(&mut net, &split.train, &cfg)?;
            Ok(measure_exit_fractions(&net, &ExitPolicy::entropy(beta), &split.validation.x)?)
        };
        let plan = match spec {
            PlacementSpec::Fixed { exits } => PlacementPlan {
                strategy: "fixed".into(),
                th: None,
                exits: exits.clone(),
                decisions: Vec::new(),
                expected_cost: None,
            },
            PlacementSpec::Greedy { th, probe: p } => {
                profile = profile.with_reach(probe(p.epochs, p.beta)?)?;
                greedy_placement(&profile, *th)?
            }
            PlacementSpec::Exhaustive { max_exits, probe: p } => {
                profile = profile.with_reach(probe(p.epochs, p.beta)?)?;
                exhaustive_placement(&profile, *max_exits)?
            }
            PlacementSpec::Percentile { percentiles } => percentile_placement(&profile, percentiles)?,
        };
        if let Some(bad) = plan.exits.iter().find(|&&e| e == 0 || e >= depth) {
            bail!("exit {bad} outside 1..{depth}");
        }
        profile.write_csv(&self.path("cost_profile.csv"))?;
        self.write_json("placement.json", &plan)?;
        Ok(vec!["cost_profile.csv".into(), "placement.json".into()])
    }

    fn train(&self) -> Result<Vec<String>> {
        let cfg = self.training()?;
        let split = self.split()?;
        let plan: PlacementPlan = self.read_json("placement.json")?;
        let gated = matches!(cfg.strategy, Strategy::GatedRecursive | Strategy::CostRegularized);
        let mut net = self.build(&split, &plan.exits, MODEL_STREAM, gated || self.model_spec()?.gates)?;
        let report = train(&mut net, &split.train, cfg)?;
        net.save(&self.path("model.json"))?;
        report.write_metrics_csv(&self.path("train_metrics.csv"))?;
        let (train_loss, train_acc) = exit_metrics(&net, &split.train.x, &split.train.y)?;
        let (val_loss, val_acc) = exit_metrics(&net, &split.validation.x, &split.validation.y)?;
        self.write_json(
            "train_summary.json",
            &json!({
                "exit_depths": net.all_exit_depths(),
                "train_loss": train_loss,
                "train_accuracy": train_acc,
                "validation_loss": val_loss,
                "validation_accuracy": val_acc,
            }),
        )?;
        Ok(vec![
            "model.json".into(),
            "model.weights.json".into(),
            "train_metrics.csv".into(),
            "train_summary.json".into(),
        ])
    }

    fn calibrate(&self) -> Result<Vec<String>> {
        let spec = self.cfg.policy.as_ref().context("config has no `policy` section")?;
        let net = self.load_model()?;
        let val = self.split()?.validation;
        let mut out = vec!["calibration.json".to_string()];
        let doc = match spec {
            PolicySpec::PerExit { budget } => {
                let betas = calibrate_thresholds_per_exit(&net, &val.x, &val.y, *budget)?;
                json!({ "policy": ExitPolicy::entropy_per_exit(betas), "budget": budget })
            }
            PolicySpec::Single { target_drop, mu, max_iters } => {
                let baseline = run_adaptive_inference(&net, &ExitPolicy::AlwaysFinal, &val.x, None)?.accuracy(&val.y);
                let target = baseline - target_drop;
                let r = calibrate_single_threshold(&net, &val.x, &val.y, target, *mu, *max_iters)?;
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["iteration", "beta", "accuracy"])?;
                for s in &r.log {
                    w.write_record([s.iteration.to_string(), format!("{:?}", s.beta), format!("{:?}", s.accuracy)])?;
                }
                write_csv_body(&self.path("calibration_log.csv"), "calibration-log", w)?;
                out.push("calibration_log.csv".into());
                json!({
                    "policy": ExitPolicy::entropy(r.beta),
                    "target": r.target,
                    "accuracy": r.accuracy,
                    "converged": r.converged,
                    "iterations": r.log.len() - 1,
                })
            }
            PolicySpec::Fixed { policy } => {
                policy.validate(&net)?;
                json!({ "policy": policy })
            }
        };
        self.write_json("calibration.json", &doc)?;
        Ok(out)
    }

    fn infer(&self) -> Result<Vec<String>> {
        let net = self.load_model()?;
        let policy = self.policy()?;
        let test = self.split()?.test;
        let out = run_adaptive_inference(&net, &policy, &test.x, None)?;
        let full = run_adaptive_inference(&net, &ExitPolicy::AlwaysFinal, &test.x, None)?;
        out.ledger.write_csv(&self.path("exit_costs.csv"))?;
        ExitLog::from_ledger(&out.ledger).write_csv(&self.path("exit_log.csv"))?;
        overthinking_report(&net, &test.x, &test.y)?.write_csv(&self.path("overthinking.csv"))?;
        let (acc, full_acc) = (out.accuracy(&test.y), full.accuracy(&test.y));
        self.write_json(
            "inference_summary.json",
            &json!({
                "samples": test.len(),
                "accuracy": acc,
                "always_final_accuracy": full_acc,
                "accuracy_drop": full_acc - acc,
                "average_cost": out.ledger.average_cost,
                "full_cost": out.ledger.full_cost,
                "relative_cost": out.ledger.relative_cost(),
                "exit_depths": out.ledger.exit_depths,
                "exit_fraction": out.ledger.exit_fraction,
            }),
        )?;
        Ok(vec![
            "exit_costs.csv".into(),
            "exit_log.csv".into(),
            "overthinking.csv".into(),
            "inference_summary.json".into(),
        ])
    }

    fn simulate(&self) -> Result<Vec<String>> {
        let spec = self.cfg.topology.as_ref().context("config has no `topology` section")?;
        let net = self.load_model()?;
        let f = File::open(self.path("exit_log.csv")).context("opening exit_log.csv; run `infer` first")?;
        let log = ExitLog::read_csv(f, &net.all_exit_depths())?;
        let model = SimModel::from_network(&net);
        let report = simulate(&model, &spec.candidates[0], &log)?;
        report.write_csv(&self.path("sim_samples.csv"))?;
        self.write_json(
            "sim_summary.json",
            &json!({
                "mean_latency_ms": report.mean_latency_ms,
                "p50_ms": report.p50_ms,
                "p95_ms": report.p95_ms,
                "p99_ms": report.p99_ms,
                "epsilon_ms": report.epsilon_ms,
                "tiers": report.tiers,
                "links": report.links,
            }),
        )?;
        let mut out = vec!["sim_samples.csv".to_string(), "sim_summary.json".to_string()];
        if spec.candidates.len() > 1 {
            let ranking = compare_partitions(&model, &spec.candidates, &log)?;
            write_ranking_csv(&ranking, &self.path("partition_ranking.csv"))?;
            out.push("partition_ranking.csv".into());
        }
        Ok(out)
    }

    fn diag(&self) -> Result<Vec<String>> {
        let spec = self.cfg.diagnostics.as_ref().context("config has no `diagnostics` section")?;
        let split = self.split()?;
        let mut out = Vec::new();
        if let Some(bins) = spec.ib_bins {
            let net = self.load_model()?;
            let points = ib_plane(&net, &split.test.x, &split.test.y, bins)?;
            write_ib_csv(&points, &self.path("ib_plane.csv"))?;
            out.push("ib_plane.csv".into());
        }
        if let Some(c) = &spec.convergence {
            let plan: PlacementPlan = self.read_json("placement.json")?;
            let setup = NetSetup {
                backbone: self.backbone(&split)?,
                placement: plan.exits,
                head: self.model_spec()?.head,
                gates: self.model_spec()?.gates,
            };
            let runs: Vec<(String, TrainingConfig)> = c.runs.iter().map(|r| (r.label.clone(), r.training.clone())).collect();
            let report = convergence_compare(&setup, &split.train, &runs, c.target_loss, &c.seeds)?;
            report.write_csv(&self.path("convergence.csv"))?;
            let medians: serde_json::Map<String, serde_json::Value> = c
                .runs
                .iter()
                .map(|r| (r.label.clone(), json!(report.median_epochs(&r.label))))
                .collect();
            self.write_json(
                "convergence_summary.json",
                &json!({ "target_loss": c.target_loss, "epochs": report.epochs, "median_epochs_to_target": medians }),
            )?;
            out.extend(["convergence.csv".into(), "convergence_summary.json".into()]);
        }
        Ok(out)
    }
}

fn write_csv_body(path: &Path, kind: &str, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let body = w.into_inner().map_err(|e| e.into_error())?;
    let mut text = schema_comment(kind);
    text.push('\n');
    text.push_str(std::str::from_utf8(&body)?);
    std::fs::write(path, text)?;
    Ok(())
}
