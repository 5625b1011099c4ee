use std::path::Path;
use std::process::{Command, Output};

use eta_core::harness::SweepConfig;

fn etalab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_etalab")).args(args).output().expect("spawn etalab")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = SweepConfig::standard(vec![3, 4], vec![1.0, 2.0], 17);
    cfg.n_predict = 10;
    let path = dir.join("sweep.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn examples_exit_code_reflects_golden_table() {
    let out = etalab(&["examples"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("uneven-variance"));
    let failing = text.lines().any(|l| l.ends_with("FAIL"));
    assert_eq!(out.status.code(), Some(if failing { 1 } else { 0 }));
}

#[test]
fn sweep_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = etalab(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--threads", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("grid_size,alpha,seg_simple,route,route_grow,bayes_optimal,lb\n"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["master_seed"], 17);
    assert_eq!(manifest["threads"], 2);
    assert!(manifest["wall_time_secs"].as_f64().unwrap() >= 0.0);

    let again = dir.path().join("again");
    let out = etalab(&["sweep", "--config", cfg.to_str().unwrap(), "--out", again.to_str().unwrap(), "--threads", "1"]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(again.join("sweep.csv")).unwrap(), csv.into_bytes());
}

#[test]
fn overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("o");
    let out = etalab(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--grid-sizes",
        "2",
        "--exponents",
        "1,1.5",
        "--seed",
        "5",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("2,1.5,"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "grid_sizes = [3]\n").unwrap();
    assert_eq!(etalab(&["sweep", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    let missing = dir.path().join("missing.toml");
    assert_eq!(etalab(&["sweep", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
    let cfg = small_config(dir.path());
    let out = etalab(&["sweep", "--config", cfg.to_str().unwrap(), "--grid-sizes", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(etalab(&["oracle", "--fixture", "nope"]).status.code(), Some(2));
    assert_eq!(etalab(&["diag", "--covariance", "bogus:x=1"]).status.code(), Some(2));
}

#[test]
fn oracle_and_diag_and_explain() {
    let out = etalab(&["oracle", "--fixture", "negative-pair", "--replicates", "2000"]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("route exact"));

    let out = etalab(&["diag", "--covariance", "gram:law=unif01,seed=3", "--p", "3"]);
    assert!(out.status.success());
    let diag: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(diag["dim"], 48);

    let out = etalab(&["explain"]);
    assert!(out.status.success());
    let explain: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(explain["terms"].as_array().unwrap().len(), 15);
}
