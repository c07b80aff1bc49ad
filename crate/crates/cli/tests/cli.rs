use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;

fn multiexit(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multiexit"))
        .args(args)
        .env("MULTIEXIT_OUT", root)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn full_config(n: usize, out: &str) -> String {
    format!(
        r#"{{
  "seed": 8,
  "output_dir": "{out}",
  "dataset": {{"source": "mixture", "n": {n}, "easy_fraction": 0.8, "classes": 4}},
  "model": {{"widths": [32, 32, 32, 32, 32]}},
  "placement": {{"strategy": "greedy", "th": 0.5, "probe": {{"epochs": 3}}}},
  "training": {{"strategy": "joint", "epochs": 10, "batch_size": 32, "learning_rate": 0.05}},
  "policy": {{"calibration": "per_exit"}},
  "topology": {{"candidates": [
    {{"tiers": [{{"name": "device", "compute_rate": 1000}}, {{"name": "edge", "compute_rate": 10000}}],
      "links": [{{"latency_ms": 5, "bandwidth": 100}}], "partition": [0, 0, 1, 1, 1, 1]}},
    {{"tiers": [{{"name": "device", "compute_rate": 1000}}], "links": [], "partition": [0, 0, 0, 0, 0, 0]}}
  ]}},
  "diagnostics": {{"ib_bins": 16, "convergence": {{"target_loss": 0.5, "seeds": [0, 1, 2],
    "runs": [{{"label": "standard", "training": {{"strategy": "standard", "epochs": 4, "batch_size": 32, "learning_rate": 0.05}}}},
             {{"label": "joint", "training": {{"strategy": "joint", "epochs": 4, "batch_size": 32, "learning_rate": 0.05}}}}]}}}}
}}"#
    )
}

const GEN_ONLY: &str =
    r#"{"seed": 1, "output_dir": "gen", "dataset": {"source": "mixture", "n": 200, "easy_fraction": 0.5, "classes": 4}}"#;

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_only_writes_only_the_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", GEN_ONLY);
    ok(&multiexit(tmp.path(), &["run", "-c", &cfg]));
    let files: Vec<String> = read_dir(&tmp.path().join("gen")).into_keys().collect();
    assert_eq!(
        files,
        [
            "dataset.json",
            "dataset_test.csv",
            "dataset_train.csv",
            "dataset_validation.csv",
            "gen.manifest.json"
        ]
    );
    let info: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("gen/dataset.json")).unwrap()).unwrap();
    assert_eq!((info["train"].as_u64(), info["validation"].as_u64(), info["test"].as_u64()), (Some(140), Some(30), Some(30)));
}

#[test]
fn full_pipeline_is_bit_identical_and_fast() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_config(tmp.path(), "a.json", &full_config(10_000, "a"));
    let b = write_config(tmp.path(), "b.json", &full_config(10_000, "b"));
    let start = Instant::now();
    ok(&multiexit(tmp.path(), &["run", "-c", &a]));
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 300, "{elapsed:?}");
    ok(&multiexit(tmp.path(), &["run", "-c", &b]));
    let (fa, fb) = (read_dir(&tmp.path().join("a")), read_dir(&tmp.path().join("b")));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        if name.ends_with(".manifest.json") {
            // The configs differ only in output_dir.
            let (ma, mb) = (manifest(&tmp.path().join("a").join(name)), manifest(&tmp.path().join("b").join(name)));
            assert_eq!(ma["artifacts"], mb["artifacts"]);
            continue;
        }
        assert!(bytes == &fb[name], "{name} differs between reruns");
    }
    for stage in ["gen", "place", "train", "calibrate", "infer", "simulate", "diag"] {
        assert!(fa.contains_key(&format!("{stage}.manifest.json")), "{stage}");
    }
    for (name, bytes) in &fa {
        if name.ends_with(".csv") {
            let text = std::str::from_utf8(bytes).unwrap();
            let mut lines = text.lines();
            assert!(lines.next().unwrap().starts_with("# schema: multiexit/"), "{name}");
            assert!(lines.next().unwrap().contains(','), "{name} header");
        }
    }
    let summary: Value = serde_json::from_slice(&fa["inference_summary.json"]).unwrap();
    assert!(summary["relative_cost"].as_f64().unwrap() < 1.0);
}

#[test]
fn manifest_hash_tracks_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", GEN_ONLY);
    let m = tmp.path().join("gen/gen.manifest.json");
    ok(&multiexit(tmp.path(), &["gen", "-c", &cfg]));
    let first = manifest(&m);
    ok(&multiexit(tmp.path(), &["gen", "-c", &cfg]));
    assert_eq!(first["config_hash"], manifest(&m)["config_hash"]);
    ok(&multiexit(tmp.path(), &["gen", "-c", &cfg, "--seed", "9"]));
    let seeded = manifest(&m);
    assert_ne!(first["config_hash"], seeded["config_hash"]);
    assert_eq!(seeded["seed"], 9);
    assert_eq!(seeded["config"]["seed"], 9);
    assert!(first["versions"]["multiexit"].is_string());
}

#[test]
fn defaults_are_echoed_into_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"seed": 2, "output_dir": "d", "dataset": {"source": "mixture", "n": 200, "easy_fraction": 0.5, "classes": 4},
            "model": {"widths": [8, 8]}, "placement": {"strategy": "fixed", "exits": [1]},
            "training": {"strategy": "joint", "epochs": 2, "batch_size": 16, "learning_rate": 0.1},
            "policy": {"calibration": "single", "target_drop": 0.05}}"#,
    );
    ok(&multiexit(tmp.path(), &["run", "-c", &cfg]));
    let m = manifest(&tmp.path().join("d/calibrate.manifest.json"));
    assert_eq!(m["config"]["policy"]["mu"], 1.0);
    assert_eq!(m["config"]["policy"]["max_iters"], 200);
    assert_eq!(m["config"]["training"]["seed"], 2);
    assert!(m["config"]["training"]["exit_weights"].is_object());
    assert!(tmp.path().join("d/calibration_log.csv").exists());
}

#[test]
fn unknown_keys_fail_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &GEN_ONLY.replace("\"seed\"", "\"sede\": 1, \"seed\""));
    let out = multiexit(tmp.path(), &["run", "-c", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
    assert!(!tmp.path().join("gen").exists());
}

#[test]
fn failing_stage_is_named_and_earlier_artifacts_survive() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"seed": 2, "output_dir": "f", "dataset": {"source": "mixture", "n": 200, "easy_fraction": 0.5, "classes": 4},
            "model": {"widths": [8, 8]}, "placement": {"strategy": "fixed", "exits": [7]},
            "training": {"strategy": "joint", "epochs": 2, "batch_size": 16, "learning_rate": 0.1}}"#,
    );
    let out = multiexit(tmp.path(), &["run", "-c", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `place` failed"));
    let before = read_dir(&tmp.path().join("f"));
    assert!(before.contains_key("dataset_train.csv") && !before.contains_key("placement.json"));

    let out = multiexit(tmp.path(), &["train", "-c", &cfg]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `train` failed"));
    assert_eq!(read_dir(&tmp.path().join("f")), before);
}

#[test]
fn tabular_input_is_loaded_and_split() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csv = String::from("a,b,label\n");
    for i in 0..100 {
        csv.push_str(&format!("{},{},{}\n", i as f64 * 0.5, -(i as f64), i % 3));
    }
    std::fs::write(tmp.path().join("data.csv"), &csv).unwrap();
    let body = format!(
        r#"{{"seed": 4, "output_dir": "t", "dataset": {{"source": "csv", "path": "{}"}}}}"#,
        tmp.path().join("data.csv").display()
    );
    let cfg = write_config(tmp.path(), "c.json", &body);
    ok(&multiexit(tmp.path(), &["gen", "-c", &cfg]));
    let info: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("t/dataset.json")).unwrap()).unwrap();
    assert_eq!(info["classes"], 3);
    assert_eq!((info["train"].as_u64(), info["validation"].as_u64(), info["test"].as_u64()), (Some(70), Some(15), Some(15)));

    std::fs::write(tmp.path().join("data.csv"), "a,b,label\n1,2,0\n3,1\n").unwrap();
    let out = multiexit(tmp.path(), &["gen", "-c", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn out_flag_overrides_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", GEN_ONLY);
    let other = tmp.path().join("elsewhere");
    let out = multiexit(tmp.path(), &["--out", other.to_str().unwrap(), "gen", "-c", &cfg]);
    ok(&out);
    assert!(other.join("gen/dataset.json").exists());
    assert!(!tmp.path().join("gen").exists());
}
