//! End-to-end runs of the `diversefl` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_diversefl"));
    c.env_remove("DIVERSEFL_OUT_DIR");
    c
}

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write_config(dir: &Path, name: &str, value: serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

fn minimal(rounds: usize) -> serde_json::Value {
    serde_json::json!({
        "n": 5, "f": 1, "rounds": rounds,
        "lr": {"initial": 0.1},
        "batch_fraction": 0.25,
        "sampling_rate": 0.1,
        "rule": "diversefl",
        "faults": {"type": "gaussian", "sigma": 10.0},
        "dataset": {"source": "synthetic", "classes": 3, "input_dim": 4,
                    "train_per_class": 100, "test_per_class": 20, "spread": 0.3},
        "model": {"hidden": [8]},
        "seed": 4,
        "metrics_warmup": 0
    })
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_three_artifacts_with_one_row_per_round() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", minimal(5));
    let out = tmp.path().join("out");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["rounds.csv", "summary.json", "manifest.json"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let csv = fs::read_to_string(out.join("rounds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn out_dir_defaults_to_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", minimal(2));
    let out = tmp.path().join("from_env");
    let o = bin()
        .args(["run", "--config", cfg.to_str().unwrap()])
        .env("DIVERSEFL_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("rounds.csv").is_file());
}

#[test]
fn reruns_are_byte_identical_and_seed_override_changes_them() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", minimal(8));
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    for (k, d) in dirs.iter().enumerate() {
        let mut args = vec!["run", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()];
        if k == 2 {
            args.extend(["--seed", "99"]);
        }
        assert!(run(&args).status.success());
    }
    let read = |d: &PathBuf| fs::read(d.join("rounds.csv")).unwrap();
    assert_eq!(read(&dirs[0]), read(&dirs[1]));
    assert_ne!(read(&dirs[0]), read(&dirs[2]));
}

#[test]
fn validation_errors_exit_2_and_name_fields() {
    let tmp = TempDir::new().unwrap();
    let mut bad = minimal(5);
    bad["f"] = 9.into();
    bad["batch_fraction"] = 0.0.into();
    let cfg = write_config(tmp.path(), "bad.json", bad);
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("  f:"), "{err}");
    assert!(err.contains("batch_fraction"), "{err}");

    let typo = tmp.path().join("typo.json");
    fs::write(&typo, r#"{"n": 5, "roundz": 3}"#).unwrap();
    let o = run(&["run", "--config", typo.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn anomalies_exit_3() {
    let tmp = TempDir::new().unwrap();
    let mut c = minimal(3);
    // No update can have a length ratio in (50, 100).
    c["thresholds"] = serde_json::json!({"eps1": 0.0, "eps2": 50.0, "eps3": 100.0});
    let cfg = write_config(tmp.path(), "c.json", c);
    let out = tmp.path().join("o");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(fs::read_to_string(out.join("rounds.csv"))
        .unwrap()
        .contains("no_survivors"));
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--max-anomalies",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn sweep_over_f_and_rule() {
    let tmp = TempDir::new().unwrap();
    let mut c = minimal(4);
    c["n"] = 7.into();
    c["rule"] = "median".into();
    let cfg = write_config(tmp.path(), "c.json", c);
    let out = tmp.path().join("f");
    let o = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--axis",
        "f",
        "--values",
        "1,5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cmp = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = cmp.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("f,rule,"));
    assert!(rows[1].starts_with("1,median,") && rows[2].starts_with("5,median,"));
    assert!(out.join("f=1/rounds.csv").is_file() && out.join("f=5/rounds.csv").is_file());

    let out = tmp.path().join("rule");
    let o = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--axis",
        "rule",
        "--values",
        "oracle,median,diversefl",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cmp = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(cmp.lines().count(), 4);
    let faulty: Vec<serde_json::Value> = ["oracle", "median", "diversefl"]
        .iter()
        .map(|r| {
            let s: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(out.join(format!("rule={r}/summary.json"))).unwrap()).unwrap();
            s["faulty_ids"].clone()
        })
        .collect();
    assert!(faulty.windows(2).all(|w| w[0] == w[1]));
    // Rounds share client selections across rules.
    let selected = |r: &str| -> Vec<String> {
        fs::read_to_string(out.join(format!("rule={r}/rounds.csv")))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(7).unwrap().to_string())
            .collect()
    };
    assert_eq!(selected("oracle"), selected("diversefl"));
}

#[test]
fn sweep_rejects_bad_requests() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", minimal(2));
    let c = cfg.to_str().unwrap();
    let o = run(&[
        "sweep",
        "--config",
        c,
        "--axis",
        "f",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(&["sweep", "--config", c, "--axis", "dataset.source", "--values", "idx"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cannot be swept"));
    let o = run(&["sweep", "--config", c, "--axis", "f", "--values", "1,9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("f=9"));
}

fn bound_base() -> serde_json::Value {
    serde_json::json!({
        "mu": 1.0, "l": 2.0, "l1": 2.0, "sigma1": 1.0, "sigma2": 1.0, "gamma1": 1.0, "gamma2": 1.0,
        "beta": 0.1, "r": 1.0, "s": 1000, "d": 10, "n": 23, "delta_total": 0.05, "eps3": 2.0, "alpha": 0.001
    })
}

fn table_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.starts_with("warning"))
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect()
}

#[test]
fn bound_table_rows_and_marks() {
    let tmp = TempDir::new().unwrap();
    let one = write_config(tmp.path(), "one.json", bound_base());
    let o = run(&["bound", "--config", one.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = table_rows(&stdout(&o));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].last().unwrap(), "contractive");

    let mut neg = bound_base();
    neg["alpha"] = serde_json::Value::Null;
    let neg = write_config(tmp.path(), "neg.json", neg);
    let rows = table_rows(&stdout(&run(&["bound", "--config", neg.to_str().unwrap()])));
    let rho: f64 = rows[0][9].parse().unwrap();
    assert!(rho < 0.0);
    assert_eq!(rows[0].last().unwrap(), "NON-CONTRACTIVE");

    let mut grid = bound_base();
    grid["s"] = serde_json::json!([10, 100, 1000]);
    let grid = write_config(tmp.path(), "grid.json", grid);
    let rows = table_rows(&stdout(&run(&["bound", "--config", grid.to_str().unwrap()])));
    let gamma1: Vec<f64> = rows.iter().map(|r| r[7].parse().unwrap()).collect();
    assert_eq!(gamma1.len(), 3);
    assert!(gamma1[0] > gamma1[1] && gamma1[1] > gamma1[2], "{gamma1:?}");
}

#[test]
fn capacity_examples() {
    for (client, enclave, expected) in [("1500", "10", "150"), ("38", "1", "38")] {
        let o = run(&["capacity", "--client-ms", client, "--enclave-ms", enclave]);
        assert!(o.status.success());
        assert_eq!(stdout(&o).trim(), expected);
        assert!(stderr(&o).is_empty());
    }
    let o = run(&["capacity", "--client-ms", "5", "--enclave-ms", "10"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "0");
    assert!(stderr(&o).contains("bottleneck"));
    let o = run(&["capacity", "--client-ms", "5", "--enclave-ms", "0"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn shipped_configs_parse() {
    for name in ["mnist_analog.json", "quick.json"] {
        let path = config_dir().join(name);
        diversefl_cli::load_config(&path, None).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(config_dir().join("bound_grid.json")).unwrap()).unwrap();
    assert_eq!(diversefl_cli::bound_rows(&doc).unwrap().len(), 6);
}

#[test]
fn trace_file_has_one_block_per_client() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("q");
    let cfg = config_dir().join("quick.json");
    let o = run(&[
        "--workers",
        "1",
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = fs::read_to_string(out.join("trace.dat")).unwrap();
    assert_eq!(trace.matches("# client ").count(), 7);
    assert_eq!(trace.split("\n\n\n").count(), 7);
    let data_lines = trace.lines().filter(|l| !l.is_empty() && !l.starts_with('#')).count();
    assert_eq!(data_lines, 7 * 20);
}
