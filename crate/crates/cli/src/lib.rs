//! Subcommands behind the `diversefl` binary.
//!
//! Configuration files are JSON. A run writes `rounds.csv`, `summary.json`,
//! `manifest.json` and, when similarity values were recorded, a gnuplot
//! friendly `trace.dat`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use diversefl_core::orchestrator::{format_number, write_rounds_csv, ConfigErrors, OrchestratorError};
use diversefl_core::theory::{capacity, BoundParams, BoundReport, TheoryError};
use diversefl_core::{ExperimentConfig, ExperimentResult, RoundRecord, Rule, Simulation, Summary};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ROUNDS_CSV: &str = "rounds.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const TRACE_DAT: &str = "trace.dat";
pub const COMPARISON_CSV: &str = "comparison.csv";

/// Dotted config paths `cmd_sweep` accepts.
pub const SWEEPABLE: [&str; 19] = [
    "n",
    "f",
    "rounds",
    "local_steps",
    "client_fraction",
    "batch_fraction",
    "l2",
    "sampling_rate",
    "rule",
    "seed",
    "lr.initial",
    "faults.type",
    "faults.sigma",
    "thresholds.eps1",
    "thresholds.eps2",
    "thresholds.eps3",
    "resampling_group",
    "root_fraction",
    "metrics_warmup",
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid configuration:\n{0}")]
    Validation(ConfigErrors),
    #[error("{0}")]
    Usage(String),
    #[error("axis `{0}` cannot be swept")]
    NotSweepable(String),
    #[error(transparent)]
    Run(OrchestratorError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// Process exit status: 2 for anything wrong with the inputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Validation(_) | CliError::Usage(_) | CliError::NotSweepable(_) => 2,
            CliError::Run(OrchestratorError::Config(_)) => 2,
            _ => 1,
        }
    }
}

impl From<OrchestratorError> for CliError {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::Config(errors) => CliError::Validation(errors),
            other => CliError::Run(other),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialization with object keys sorted and no whitespace.
pub fn canonical_json(value: &Value) -> String {
    // serde_json's default map is ordered by key.
    serde_json::to_string(value).expect("Value always serializes")
}

pub fn config_hash(config: &ExperimentConfig) -> Result<String, CliError> {
    let canonical = canonical_json(&serde_json::to_value(config)?);
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig, CliError> {
    serde_json::from_str(text).map_err(|source| CliError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads and validates a config, applying an optional seed override.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut config = parse_config(&text, path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate().map_err(CliError::Validation)?;
    Ok(config)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub artifacts: Vec<PathBuf>,
    pub tool_version: String,
    pub seed: u64,
    pub duration_secs: f64,
    pub anomaly_rounds: usize,
}

#[derive(Debug)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub summary: Summary,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// One block per client, separated by two blank lines so gnuplot can address
/// each with `index`. Columns: round, c1, c2, passed.
pub fn write_trace<W: Write>(mut out: W, faulty: &BTreeSet<usize>, records: &[RoundRecord]) -> std::io::Result<()> {
    let clients: BTreeSet<usize> = records
        .iter()
        .flat_map(|r| r.similarities.iter().map(|s| s.client_id))
        .collect();
    for (block, &client) in clients.iter().enumerate() {
        if block > 0 {
            writeln!(out)?;
            writeln!(out)?;
        }
        let kind = if faulty.contains(&client) { "faulty" } else { "normal" };
        writeln!(out, "# client {client} {kind}")?;
        writeln!(out, "# round c1 c2 passed")?;
        for r in records {
            if let Some(s) = r.similarities.iter().find(|s| s.client_id == client) {
                writeln!(
                    out,
                    "{} {} {} {}",
                    r.round,
                    format_number(s.c1),
                    format_number(s.c2),
                    u8::from(s.passed)
                )?;
            }
        }
    }
    Ok(())
}

/// Writes the artifacts of a finished experiment into `out_dir`.
pub fn write_artifacts(
    config: &ExperimentConfig,
    result: &ExperimentResult,
    out_dir: &Path,
    duration_secs: f64,
) -> Result<RunManifest, CliError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut artifacts = Vec::new();

    let rounds = out_dir.join(ROUNDS_CSV);
    let file = fs::File::create(&rounds).map_err(io_err(&rounds))?;
    write_rounds_csv(BufWriter::new(file), config.n, &result.records)?;
    artifacts.push(rounds);

    let summary = out_dir.join(SUMMARY_JSON);
    write_json(&summary, &result.summary)?;
    artifacts.push(summary);

    if result.records.iter().any(|r| !r.similarities.is_empty()) {
        let trace = out_dir.join(TRACE_DAT);
        let file = fs::File::create(&trace).map_err(io_err(&trace))?;
        let mut w = BufWriter::new(file);
        write_trace(&mut w, &result.summary.faulty_ids, &result.records)
            .and_then(|_| w.flush())
            .map_err(io_err(&trace))?;
        artifacts.push(trace);
    }

    let manifest_path = out_dir.join(MANIFEST_JSON);
    artifacts.push(manifest_path.clone());
    let manifest = RunManifest {
        config_hash: config_hash(config)?,
        artifacts,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        duration_secs,
        anomaly_rounds: result.summary.anomaly_rounds.len(),
    };
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

/// Runs an already validated config and writes its artifacts.
pub fn run_config(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutput, CliError> {
    let start = Instant::now();
    let sim = Simulation::from_config(config.clone())?;
    let result = sim.run()?;
    let manifest = write_artifacts(config, &result, out_dir, start.elapsed().as_secs_f64())?;
    Ok(RunOutput {
        manifest,
        summary: result.summary,
    })
}

pub fn cmd_run(config_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<RunOutput, CliError> {
    let config = load_config(config_path, seed)?;
    run_config(&config, out_dir)
}

/// Parses a sweep value: JSON literal if it parses, bare string otherwise.
fn sweep_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Returns `config` with the dotted `axis` set to `value`.
pub fn override_field(config: &ExperimentConfig, axis: &str, value: &Value) -> Result<ExperimentConfig, CliError> {
    if !SWEEPABLE.contains(&axis) {
        return Err(CliError::NotSweepable(axis.to_string()));
    }
    let mut doc = serde_json::to_value(config)?;
    let mut node = &mut doc;
    let parts: Vec<&str> = axis.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(*part))
            .ok_or_else(|| CliError::Usage(format!("`{axis}` is not present in this configuration")))?;
    }
    let last = parts[parts.len() - 1];
    let map = node
        .as_object_mut()
        .ok_or_else(|| CliError::Usage(format!("`{axis}` is not present in this configuration")))?;
    map.insert(last.to_string(), value.clone());
    serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("{axis}={value}: {e}")))
}

/// Directory-safe rendering of a sweep value.
fn point_dir_name(axis: &str, value: &Value) -> String {
    let raw = match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    let clean: String = raw
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{}={}", axis.replace('.', "_"), clean)
}

#[derive(Debug)]
pub struct SweepPoint {
    pub value: String,
    pub rule: Rule,
    pub out_dir: PathBuf,
    pub output: RunOutput,
}

fn opt(x: Option<f64>) -> String {
    x.map(format_number).unwrap_or_default()
}

pub fn write_comparison<W: Write>(out: W, axis: &str, points: &[SweepPoint]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        axis,
        "rule",
        "final_accuracy",
        "best_accuracy",
        "mean_precision",
        "mean_recall",
        "anomaly_rounds",
        "out_dir",
    ])?;
    for p in points {
        let s = &p.output.summary;
        w.write_record([
            p.value.clone(),
            p.rule.name().to_string(),
            opt(s.final_accuracy),
            opt(s.best_accuracy),
            opt(s.mean_precision),
            opt(s.mean_recall),
            s.anomaly_rounds.len().to_string(),
            p.out_dir.display().to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::Run(OrchestratorError::Io(e)))
}

/// One run per value of `axis`, each in its own directory under `out_dir`,
/// then `comparison.csv` once all of them finished.
pub fn cmd_sweep(
    config_path: &Path,
    axis: &str,
    values: &[String],
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<Vec<SweepPoint>, CliError> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    if !SWEEPABLE.contains(&axis) {
        return Err(CliError::NotSweepable(axis.to_string()));
    }
    let base = load_config(config_path, seed)?;
    let mut configs = Vec::with_capacity(values.len());
    let mut errors = Vec::new();
    for raw in values {
        let value = sweep_value(raw);
        let config = override_field(&base, axis, &value)?;
        match config.validate() {
            Ok(()) => configs.push((raw.clone(), out_dir.join(point_dir_name(axis, &value)), config)),
            Err(e) => errors.extend(e.0.into_iter().map(|mut fe| {
                fe.field = format!("{} ({axis}={raw})", fe.field);
                fe
            })),
        }
    }
    if !errors.is_empty() {
        return Err(CliError::Validation(ConfigErrors(errors)));
    }
    let outputs: Vec<Result<SweepPoint, CliError>> = configs
        .into_par_iter()
        .map(|(value, dir, config)| {
            let output = run_config(&config, &dir)?;
            Ok(SweepPoint {
                value,
                rule: config.rule,
                out_dir: dir,
                output,
            })
        })
        .collect();
    let points = outputs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let path = out_dir.join(COMPARISON_CSV);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    write_comparison(BufWriter::new(file), axis, &points)?;
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub params: BoundParams,
    pub report: BoundReport,
}

/// Expands a bound config into grid points. Any field given as an array
/// becomes an axis; the cartesian product is taken in key order with the
/// last key varying fastest.
pub fn bound_grid(doc: &Value) -> Result<Vec<BoundParams>, CliError> {
    let map = doc
        .as_object()
        .ok_or_else(|| CliError::Usage("bound config must be a JSON object".into()))?;
    let mut points = vec![serde_json::Map::new()];
    for (key, value) in map {
        let options: Vec<Value> = match value {
            Value::Array(items) if items.is_empty() => {
                return Err(CliError::Usage(format!("grid axis `{key}` is empty")));
            }
            Value::Array(items) => items.clone(),
            other => vec![other.clone()],
        };
        let mut next = Vec::with_capacity(points.len() * options.len());
        for point in &points {
            for option in &options {
                let mut p = point.clone();
                p.insert(key.clone(), option.clone());
                next.push(p);
            }
        }
        points = next;
    }
    points
        .into_iter()
        .map(|p| serde_json::from_value(Value::Object(p)).map_err(|e| CliError::Usage(format!("bound config: {e}"))))
        .collect()
}

pub fn bound_rows(doc: &Value) -> Result<Vec<BoundRow>, CliError> {
    bound_grid(doc)?
        .into_iter()
        .map(|params| {
            let report = params.evaluate()?;
            Ok(BoundRow { params, report })
        })
        .collect()
}

/// Whitespace-aligned table; non-contractive rows end in `NON-CONTRACTIVE`.
pub fn render_bound_table(rows: &[BoundRow]) -> String {
    let header = [
        "mu",
        "L",
        "s",
        "d",
        "n",
        "eps3",
        "alpha",
        "Gamma1",
        "Gamma2",
        "rho",
        "asymptote",
        "status",
    ];
    let mut lines: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for row in rows {
        let p = &row.params;
        let r = &row.report;
        lines.push(vec![
            format!("{}", p.mu),
            format!("{}", p.l),
            p.s.to_string(),
            p.d.to_string(),
            p.n.to_string(),
            format!("{}", p.eps3),
            format!("{:.6e}", r.alpha),
            format!("{:.6e}", r.gamma1),
            format!("{:.6e}", r.gamma2),
            format!("{:.6e}", r.rho),
            format!("{:.6e}", r.asymptote),
            if r.contractive {
                "contractive"
            } else {
                "NON-CONTRACTIVE"
            }
            .to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for l in &lines {
        let cells: Vec<String> = l.iter().zip(&widths).map(|(cell, w)| format!("{cell:>w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    for (k, row) in rows.iter().enumerate() {
        for w in &row.report.warnings {
            let _ = writeln!(out, "warning (row {}): {w}", k + 1);
        }
    }
    out
}

pub fn cmd_bound(config_path: &Path) -> Result<Vec<BoundRow>, CliError> {
    let text = fs::read_to_string(config_path).map_err(io_err(config_path))?;
    let doc: Value = serde_json::from_str(&text).map_err(|source| CliError::Parse {
        path: config_path.to_path_buf(),
        source,
    })?;
    bound_rows(&doc)
}

/// Client count plus an optional warning line.
pub fn cmd_capacity(client_ms: f64, enclave_ms: f64) -> Result<(u64, Option<String>), CliError> {
    let report = capacity(client_ms, enclave_ms)?;
    let warning = (report.clients == 0).then(|| {
        format!(
            "warning: the enclave is the bottleneck ({enclave_ms} ms per client exceeds a {client_ms} ms client round)"
        )
    });
    Ok((report.clients, warning))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ExperimentConfig {
        serde_json::from_value(serde_json::json!({
            "n": 4, "f": 1, "rounds": 3, "lr": {"initial": 0.1}, "rule": "diversefl",
            "faults": {"type": "sign_flip"},
            "dataset": {"source": "synthetic", "classes": 2, "input_dim": 3,
                        "train_per_class": 40, "test_per_class": 10, "spread": 0.3},
            "model": {"hidden": []}, "seed": 3
        }))
        .unwrap()
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = r#"{"n":4,"f":1,"rounds":3,"lr":{"initial":0.1},"rule":"mean","seed":1,
            "dataset":{"source":"csv","train":"a","test":"b","classes":2},"model":{"hidden":[]}}"#;
        let b = r#"{"model":{"hidden":[]},"dataset":{"classes":2,"test":"b","train":"a","source":"csv"},
            "seed":1,"rule":"mean","lr":{"initial":0.1},"rounds":3,"f":1,"n":4}"#;
        let p = Path::new("x.json");
        let ca = parse_config(a, p).unwrap();
        let cb = parse_config(b, p).unwrap();
        assert_eq!(config_hash(&ca).unwrap(), config_hash(&cb).unwrap());
        assert_eq!(config_hash(&ca).unwrap().len(), 64);
        let mut cc = ca.clone();
        cc.seed = 2;
        assert_ne!(config_hash(&ca).unwrap(), config_hash(&cc).unwrap());
    }

    #[test]
    fn canonical_round_trip() {
        let config = minimal();
        let text = canonical_json(&serde_json::to_value(&config).unwrap());
        let back = parse_config(&text, Path::new("x")).unwrap();
        assert_eq!(back, config);
        assert_eq!(canonical_json(&serde_json::to_value(&back).unwrap()), text);
    }

    #[test]
    fn override_sets_nested_fields() {
        let base = minimal();
        let c = override_field(&base, "lr.initial", &sweep_value("0.5")).unwrap();
        assert_eq!(c.lr.initial, 0.5);
        let c = override_field(&base, "rule", &sweep_value("median")).unwrap();
        assert_eq!(c.rule, Rule::Median);
        let c = override_field(&base, "f", &sweep_value("2")).unwrap();
        assert_eq!(c.f, 2);
        assert!(matches!(
            override_field(&base, "dataset.source", &sweep_value("idx")),
            Err(CliError::NotSweepable(_))
        ));
    }

    #[test]
    fn point_dirs_are_filesystem_safe() {
        assert_eq!(point_dir_name("lr.initial", &sweep_value("0.5")), "lr_initial=0.5");
        assert_eq!(point_dir_name("rule", &sweep_value("oracle")), "rule=oracle");
        assert_eq!(point_dir_name("faults.type", &sweep_value("a/b")), "faults_type=a_b");
    }

    #[test]
    fn grid_expands_arrays_in_key_order() {
        let doc = serde_json::json!({
            "mu": 1.0, "l": 2.0, "l1": 2.0, "sigma1": 1.0, "sigma2": 1.0, "gamma1": 1.0, "gamma2": 1.0,
            "beta": 1.0, "r": 1.0, "s": [10, 100], "d": [5, 6, 7], "n": 23, "delta_total": 0.1, "eps3": 2.0
        });
        let grid = bound_grid(&doc).unwrap();
        assert_eq!(grid.len(), 6);
        let pairs: Vec<(usize, usize)> = grid.iter().map(|p| (p.d, p.s)).collect();
        assert_eq!(pairs, vec![(5, 10), (5, 100), (6, 10), (6, 100), (7, 10), (7, 100)]);
        let mut bad = doc.clone();
        bad["s"] = serde_json::json!([]);
        assert!(bound_grid(&bad).is_err());
    }

    #[test]
    fn capacity_warns_only_at_zero() {
        assert_eq!(cmd_capacity(1500.0, 10.0).unwrap(), (150, None));
        let (clients, warning) = cmd_capacity(5.0, 10.0).unwrap();
        assert_eq!(clients, 0);
        assert!(warning.unwrap().contains("bottleneck"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Validation(ConfigErrors::default()).exit_code(), 2);
        assert_eq!(CliError::NotSweepable("x".into()).exit_code(), 2);
        assert_eq!(CliError::Run(OrchestratorError::EmptyClient(0)).exit_code(), 1);
    }
}
