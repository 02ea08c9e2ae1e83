use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn vitsnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitsnn"))
        .current_dir(dir)
        .env_remove("VITSNN_OUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = vitsnn(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

/// Toy model, 16-sample dataset, thresholds and SNN archive in a fresh dir.
fn pipeline() -> TempDir {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["gen-toy", "--seed", "3", "--samples", "16"]);
    ok(d, &["calibrate", "--model", "model", "--data", "data"]);
    ok(d, &["convert", "--model", "model", "--thresholds", "thresholds.json"]);
    tmp
}

#[test]
fn calibrate_covers_every_site_and_is_reproducible() {
    let tmp = pipeline();
    let d = tmp.path();
    let first = fs::read(d.join("thresholds.json")).unwrap();
    let sites = json(&d.join("thresholds.json"))["sites"].as_object().unwrap().len();
    // embedding input plus eight sites in each of the two blocks
    assert_eq!(sites, 17);
    ok(
        d,
        &["calibrate", "--model", "model", "--data", "data", "-o", "again.json"],
    );
    assert_eq!(first, fs::read(d.join("again.json")).unwrap());
}

#[test]
fn calibrate_rejects_bad_percentiles() {
    let tmp = pipeline();
    for p in ["101", "50", "nan"] {
        let out = vitsnn(
            tmp.path(),
            &["calibrate", "--model", "model", "--data", "data", "--percentile", p],
        );
        assert_eq!(code(&out), 2, "percentile {p}");
    }
}

#[test]
fn convert_is_deterministic() {
    let tmp = pipeline();
    let d = tmp.path();
    ok(
        d,
        &[
            "convert",
            "--model",
            "model",
            "--thresholds",
            "thresholds.json",
            "-o",
            "snn2",
        ],
    );
    for f in ["manifest.json", "weights.bin", "snn.json"] {
        assert_eq!(
            fs::read(d.join("snn").join(f)).unwrap(),
            fs::read(d.join("snn2").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn convert_names_missing_sites() {
    let tmp = pipeline();
    let d = tmp.path();
    let mut th = json(&d.join("thresholds.json"));
    th["sites"].as_object_mut().unwrap().remove("b0.mlp1.in");
    fs::write(d.join("partial.json"), serde_json::to_vec(&th).unwrap()).unwrap();
    let out = vitsnn(
        d,
        &[
            "convert",
            "--model",
            "model",
            "--thresholds",
            "partial.json",
            "-o",
            "bad",
        ],
    );
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("b0.mlp1.in"));
    assert!(!d.join("bad").exists());
}

#[test]
fn analog_run_matches_the_exact_model() {
    let tmp = pipeline();
    let d = tmp.path();
    ok(
        d,
        &[
            "run",
            "--snn",
            "snn",
            "--data",
            "data",
            "-T",
            "4",
            "--mode",
            "analog_ec_only",
        ],
    );
    let r = json(&d.join("run_report.json"));
    let steps = r["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 4);
    for s in steps {
        assert_eq!(s["agreement"].as_f64().unwrap(), 1.0);
        assert!(s["max_logit_error"].as_f64().unwrap() <= 1e-6);
    }
    assert_eq!(r["format_version"], 1);
    assert_eq!(r["config"]["mode"], "analog_ec_only");
}

#[test]
fn runs_are_reproducible() {
    let tmp = pipeline();
    let d = tmp.path();
    ok(
        d,
        &[
            "run",
            "--snn",
            "snn",
            "--data",
            "data",
            "-T",
            "3",
            "--seed",
            "9",
            "--out-dir",
            "a",
        ],
    );
    ok(
        d,
        &[
            "run",
            "--snn",
            "snn",
            "--data",
            "data",
            "-T",
            "3",
            "--seed",
            "9",
            "--out-dir",
            "b",
        ],
    );
    for f in ["run_report.json", "tsweep.csv"] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn report_recomputes_energy_from_the_ledger() {
    let tmp = pipeline();
    let d = tmp.path();
    ok(
        d,
        &["run", "--snn", "snn", "--data", "data", "-T", "4", "--samples", "4"],
    );
    ok(d, &["report", "--run", "run_report.json"]);
    let e = json(&d.join("energy_report.json"));
    let (mut acs, mut macs) = (0u64, 0u64);
    for entry in e["snn_ledger"]["modules"].as_object().unwrap().values() {
        acs += entry["ops"]["acs"].as_u64().unwrap();
        macs += entry["ops"]["macs"].as_u64().unwrap();
    }
    let ann = e["ann"]["total_macs"].as_u64().unwrap() as f64 * 4.0;
    let strict = (macs as f64 * 4.6 + acs as f64 * 0.9) / (ann * 4.6);
    let paper = acs as f64 * 0.9 / (ann * 4.6);
    assert!((e["ratio"]["strict"].as_f64().unwrap() - strict).abs() <= 1e-9);
    assert!((e["ratio"]["acs_only"].as_f64().unwrap() - paper).abs() <= 1e-9);
    let csv = fs::read_to_string(d.join("tsweep.csv")).unwrap();
    assert!(csv.starts_with("metric,T=1,T=2,T=3,T=4\n"));
}

#[test]
fn output_dir_comes_from_the_environment() {
    let tmp = pipeline();
    let d = tmp.path();
    let out = Command::new(env!("CARGO_BIN_EXE_vitsnn"))
        .current_dir(d)
        .env("VITSNN_OUT_DIR", d.join("envout"))
        .args(["verify", "--suite", "table3"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("envout/verdict.json").exists());
}

#[test]
fn verify_suites() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let out = ok(d, &["verify", "--suite", "table3"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("complexity"));
    let v = json(&d.join("verdict.json"));
    assert_eq!(v["suites"].as_array().unwrap().len(), 1);

    ok(d, &["verify", "--suite", "theorem2", "--cases", "500"]);
    let v = json(&d.join("verdict.json"));
    assert_eq!(v["suites"][0]["cases"], 500);
    assert_eq!(v["passed"], true);

    assert_eq!(code(&vitsnn(d, &["verify", "--suite", "nope"])), 2);
}

#[test]
fn exit_codes_for_io_and_usage() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert_eq!(code(&vitsnn(d, &["run", "--snn", "missing", "--data", "missing"])), 1);
    assert_eq!(code(&vitsnn(d, &["run", "--snn", "x"])), 2);
    assert_eq!(code(&vitsnn(d, &["gen-toy", "--samples", "0"])), 2);
}

#[test]
fn oracle_reports_label_accuracy() {
    let tmp = pipeline();
    let d = tmp.path();
    ok(d, &["oracle", "--model", "model", "--data", "data"]);
    let o = json(&d.join("oracle.json"));
    assert_eq!(o["predictions"].as_array().unwrap().len(), 16);
    // synthetic labels are the exact model's own predictions
    assert_eq!(o["accuracy"].as_f64().unwrap(), 1.0);
}
