mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use common::*;

fn federico(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_federico"))
        .args(args)
        .env("FEDERICO_LOG", "debug")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("cfg.json");
    fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_SINE: &str = r#"{"recipe": "sine", "K": 4, "T": 6, "eval_every": 2, "data": {"n_per_client": 20}}"#;

#[test]
fn run_writes_every_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_SINE);
    let out = dir.path().join("out");
    let o = federico(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "5", "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let weights = read_weights(&out.join("weights.csv"));
    assert_eq!(weights.len(), 6);
    for m in weights.values() {
        assert_eq!(m.len(), 4);
        for row in m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let comm = fs::read_to_string(out.join("comm.csv")).unwrap();
    assert_eq!(comm.lines().count(), 7);
    assert!(comm.starts_with("round,model_bytes,gradient_bytes,total_bytes,all_to_all_bytes"));

    let metrics = read_json(&out.join("metrics.json"));
    let per_client = metrics["per_client"].as_array().unwrap();
    assert_eq!(per_client.len(), 4);
    let (num, den) = per_client.iter().fold((0.0, 0.0), |(a, b), c| {
        let n = c["n"].as_f64().unwrap();
        (a + n * c["value"].as_f64().unwrap(), b + n)
    });
    assert!((metrics["weighted_average"].as_f64().unwrap() - num / den).abs() < 1e-12);
    assert_eq!(metrics["history"].as_array().unwrap().len(), 3);

    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["complete"], true);
    assert_eq!(manifest["rounds_completed"], 6);
    assert_eq!(manifest["seed"], 5);
    assert_eq!(read_json(&out.join("config.json"))["seed"], 5);
}

#[test]
fn diverging_run_leaves_an_incomplete_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"recipe": "sine", "K": 4, "T": 50, "optimizer": {"kind": "sgd", "eta": 1e100}}"#,
    );
    let out = dir.path().join("out");
    let o = federico(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("round"));
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["status"], "failed");
    assert_eq!(manifest["complete"], false);
    let done = manifest["rounds_completed"].as_u64().unwrap() as usize;
    assert!(done < 50);
    assert_eq!(read_weights(&out.join("weights.csv")).len(), done);
    assert!(!out.join("metrics.json").exists());
}

#[test]
fn bad_input_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(federico(&["launch"]).status.code(), Some(2));
    assert_eq!(federico(&["run"]).status.code(), Some(2));

    let cfg = write_config(dir.path(), r#"{"sampler": {"epsilon": 3}}"#);
    let o = federico(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sampler.epsilon"));

    let cfg = write_config(dir.path(), SMALL_SINE);
    let out = dir.path().join("zero");
    let o = federico(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--workers", "0"]);
    assert_eq!(o.status.code(), Some(1));

    let o = federico(&["run", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_makes_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_SINE);
    let out = dir.path().join("sweep");
    let o = federico(&[
        "sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--param", "sampler.M", "--values", "1,2,3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for v in 1..=3 {
        let run = out.join(format!("sampler.M={v}"));
        assert_eq!(read_json(&run.join("config.json"))["sampler"]["neighbors"], v);
        assert_eq!(read_json(&run.join("manifest.json"))["complete"], true);
    }
    assert_eq!(fs::read_to_string(out.join("sweep.csv")).unwrap().lines().count(), 4);

    let o = federico(&[
        "sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--param", "sampler.M", "--values", "9",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn compare_shares_splits_across_methods() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_SINE);
    let out = dir.path().join("cmp");
    let o = federico(&[
        "compare", "--config", &cfg, "--out", out.to_str().unwrap(), "--splits", "2", "--seeds", "2",
        "--methods", "federico,local_only,fedavg_plus",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut reader = csv::Reader::from_path(out.join("compare.csv")).unwrap();
    let rows: Vec<(usize, usize, u64, u64, String, f64)> = reader.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 12);
    for r in &rows {
        assert_eq!(r.2, r.0 as u64);
        assert_eq!(r.3, r.1 as u64);
    }
    let summary = read_json(&out.join("compare.json"));
    assert_eq!(summary["summary"]["federico"]["split_means"].as_array().unwrap().len(), 2);

    // Same split and seed: every method sees identical test sizes.
    let n = |m: &str| read_json(&out.join(format!("split=1/seed=0/{m}/metrics.json")))["per_client"].clone();
    let sizes = |v: Value| v.as_array().unwrap().iter().map(|c| c["n"].clone()).collect::<Vec<_>>();
    assert_eq!(sizes(n("federico")), sizes(n("fedavg_plus")));
}
