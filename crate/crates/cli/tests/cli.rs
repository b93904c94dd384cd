use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn tumorcal(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tumorcal"))
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .env_remove("TUMORCAL_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(run_dir: &Path, args: &[&str]) {
    let out = tumorcal(run_dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_line(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "stderr must be one line: {text}");
    serde_json::from_str::<Value>(lines[0]).expect("stderr is JSON")["error"].clone()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// A smaller, faster phantom: 0.5 mm cells over the same anatomy.
const SMALL: &str = r#"{
  "phantom": { "nx": 21, "ny": 31, "h": 0.5, "tumor_center": [4.25, 6.25] },
  "prediction": { "samples": 6 },
  "prior_sampling": { "samples": 2 },
  "pcp": { "samples": 60 }
}"#;

fn small_run() -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("small.json"), SMALL).unwrap();
    ok(dir.path(), &["--config", "small.json", "phantom"]);
    dir
}

#[test]
fn end_to_end_pipeline_writes_manifests_and_metrics() {
    let dir = small_run();
    let d = dir.path();
    ok(d, &["--config", "small.json", "calibrate"]);
    ok(d, &["--config", "small.json", "predict"]);
    ok(d, &["--config", "small.json", "metrics", "--ensemble", "predict"]);

    let post = json(&d.join("calibrate/posterior.json"));
    assert_eq!(post["training_days"], serde_json::json!([1.0, 2.0, 3.0, 4.0]));
    assert!(post["rank"].as_u64().unwrap() > 0);
    assert!(json(&d.join("calibrate/convergence.json"))["converged"].as_bool().unwrap());

    let report = json(&d.join("metrics/report.json"));
    let dice = report["dice"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&dice));
    assert_eq!(report["ensemble"]["n"], 6);
    assert!(d.join("metrics/kde_dice.csv").exists() || json(&d.join("metrics/manifest.json"))["provenance"]
        .as_object()
        .unwrap()
        .contains_key("kde_dice.csv skipped"));

    // the prediction scored itself against the held-out day and the noiseless truth
    let pm = json(&d.join("predict/metrics.json"));
    assert!(pm["5"]["data"]["dice"].is_number() && pm["5"]["truth"]["dice"].is_number());

    for sub in ["phantom", "calibrate", "predict", "metrics"] {
        let m = json(&d.join(sub).join("manifest.json"));
        assert_eq!(m["subcommand"], sub);
        for (rel, digest) in m["outputs"].as_object().unwrap() {
            let bytes = fs::read(d.join(sub).join(rel)).unwrap();
            assert_eq!(digest_hex(&bytes), digest.as_str().unwrap(), "{sub}/{rel}");
        }
        for (rel, digest) in m["inputs"].as_object().unwrap() {
            let bytes = fs::read(d.join(rel)).unwrap();
            assert_eq!(digest_hex(&bytes), digest.as_str().unwrap(), "{sub} input {rel}");
        }
    }
    // no staging leftovers
    assert!(fs::read_dir(d).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().starts_with('.')));
}

fn digest_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn unknown_config_key_is_a_validation_error_with_its_path() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"newton": {"max_iterations": 5, "max_iter": 3}}"#).unwrap();
    let out = tumorcal(dir.path(), &["--config", "bad.json", "phantom"]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_line(&out);
    assert_eq!(e["class"], "validation");
    assert_eq!(e["kind"], "UnknownKey");
    assert!(e["message"].as_str().unwrap().contains("newton.max_iter"), "{e}");
    assert!(!dir.path().join("phantom").exists());
}

#[test]
fn unstable_time_step_is_a_numerical_failure() {
    let dir = small_run();
    fs::write(dir.path().join("dt.json"), r#"{"phantom": { "nx": 21, "ny": 31, "h": 0.5, "tumor_center": [4.25, 6.25] }, "solver": {"dt": 5.0}}"#).unwrap();
    let out = tumorcal(dir.path(), &["--config", "dt.json", "calibrate"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_line(&out);
    assert_eq!(e["class"], "numerical");
    assert_eq!(e["kind"], "StepSize");
    assert!(!dir.path().join("calibrate").exists(), "failed runs leave no output");
    assert!(fs::read_dir(dir.path()).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().starts_with('.')));
}

#[test]
fn missing_input_and_bad_arguments_exit_one() {
    let dir = TempDir::new().unwrap();
    let out = tumorcal(dir.path(), &["calibrate"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["kind"], "MissingInput");
    let out = tumorcal(dir.path(), &["calibrate", "--method", "magic"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["kind"], "Usage");
}

#[test]
fn reruns_are_bitwise_identical_across_thread_counts() {
    let dir = small_run();
    let d = dir.path();
    ok(d, &["--config", "small.json", "--threads", "1", "calibrate", "--out", "a"]);
    ok(d, &["--config", "small.json", "--threads", "3", "calibrate", "--out", "b"]);
    let (a, b) = (json(&d.join("a/manifest.json")), json(&d.join("b/manifest.json")));
    assert_eq!(a["outputs"], b["outputs"]);
    assert_eq!(a["inputs"], b["inputs"]);
    assert_eq!((a["threads"].as_u64(), b["threads"].as_u64()), (Some(1), Some(3)));
}

#[test]
fn thread_count_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tumorcal"))
        .args(["--run-dir", dir.path().to_str().unwrap(), "phantom"])
        .env("TUMORCAL_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(json(&dir.path().join("phantom/manifest.json"))["threads"], 2);
}

#[test]
fn auxiliary_subcommands_produce_their_files() {
    let dir = small_run();
    let d = dir.path();
    ok(d, &["--config", "small.json", "segment"]);
    assert!(d.join("segment/labels.txt").exists() && d.join("segment/disp_y.txt").exists());
    ok(d, &["--config", "small.json", "sample-prior"]);
    assert!(d.join("sample-prior/samples/sample_001_log_g.txt").exists());
    assert!(d.join("sample-prior/variance_log_d.txt").exists());
    ok(d, &["--config", "small.json", "forward", "--days", "0,2.5"]);
    assert!(d.join("forward/state_day_2.5.txt").exists());

    // calibrating against segmented labels works as well
    ok(d, &["--config", "small.json", "calibrate", "--labels", "segment/labels.txt", "--method", "shp", "--out", "shp"]);
    let m = json(&d.join("shp/manifest.json"));
    let bayes_dir = d.join("calibrate");
    ok(d, &["--config", "small.json", "calibrate"]);
    assert_eq!(m["provenance"]["code_path"], json(&bayes_dir.join("manifest.json"))["provenance"]["code_path"]);
    assert!(json(&d.join("shp/posterior.json"))["hyper"]["rho_int"].is_null());
}

#[test]
fn pcp_writes_a_chain_and_forecasts_from_it() {
    let dir = small_run();
    let d = dir.path();
    ok(d, &["--config", "small.json", "calibrate", "--method", "pcp"]);
    let chain = fs::read_to_string(d.join("calibrate/chain.csv")).unwrap();
    let mut lines = chain.lines();
    assert_eq!(lines.next().unwrap(), "iteration,log_d_gm,log_d_wm,log_g_gm,log_g_wm,log_posterior");
    assert_eq!(lines.count(), 60);
    let summary = json(&d.join("calibrate/summary.json"));
    assert_eq!(summary["mean"].as_array().unwrap().len(), 4);
    ok(d, &["--config", "small.json", "predict", "--samples", "3"]);
    assert!(d.join("predict/samples/sample_002_day_5.txt").exists());
}

#[test]
fn gridsearch_on_a_single_cell() {
    let dir = small_run();
    let d = dir.path();
    fs::write(d.join("space.json"), r#"{"rho_gm": [6.0], "k": [0.5], "sigma_noise": [0.0624]}"#).unwrap();
    ok(d, &["--config", "small.json", "gridsearch", "--space", "space.json"]);
    let r = json(&d.join("gridsearch/result.json"));
    assert_eq!(r["cells"].as_array().unwrap().len(), 1);
    assert_eq!(r["chosen_index"], 0);
    assert!(r["cells"][0]["on_front"].as_bool().unwrap());
    let table = fs::read_to_string(d.join("gridsearch/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
}

fn keys(v: &Value, prefix: &str, out: &mut BTreeSet<String>) {
    if let Value::Object(m) = v {
        for (k, c) in m {
            let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            out.insert(p.clone());
            keys(c, &p, out);
        }
    }
}

fn schema_keys(v: &Value, prefix: &str, out: &mut BTreeSet<String>) {
    if let Some(Value::Object(props)) = v.get("properties") {
        assert_eq!(v["additionalProperties"], false, "{prefix} must reject unknown keys");
        for (k, c) in props {
            let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            out.insert(p.clone());
            schema_keys(c, &p, out);
        }
    }
}

#[test]
fn shipped_schema_matches_the_configuration() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("empty.json"), "{}").unwrap();
    ok(dir.path(), &["--config", "empty.json", "phantom"]);
    let config = json(&dir.path().join("phantom/manifest.json"))["config"].clone();
    let schema = json(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schema/pipeline_config.schema.json"));
    let (mut a, mut b) = (BTreeSet::new(), BTreeSet::new());
    keys(&config, "", &mut a);
    schema_keys(&schema, "", &mut b);
    assert_eq!(a, b);
}
