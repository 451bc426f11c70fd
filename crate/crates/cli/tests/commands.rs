//! Behavior checks for the command layer: how the commands respond to empty,
//! missing, and malformed inputs, and that the installed binary reports
//! structured errors.

use std::path::{Path, PathBuf};
use std::process::Command;

use driftwatch_cli::commands::{cmd_eval, cmd_gen, cmd_monitor, CliError};

const SCENARIO: &str = r#"{
  "groups": ["api", "batch", "other"],
  "basis": {"sbp": [[1, -1, 0], [1, 1, -1]], "names": ["api-vs-batch", "work-vs-other"]},
  "z0": [0.1, 0.8],
  "segments": [
    {"len": 40, "beta": 0.0, "sigma": 0.01, "direction": [0.0, 0.0]},
    {"len": 20, "beta": 0.02, "sigma": 0.002, "direction": [1.0, 0.0]}
  ],
  "constraints": [{"name": "mix-cap", "coeffs": {"api": 1.0, "batch": -1.0}, "threshold": 0.6}],
  "seed": 3
}"#;

const CONFIG: &str = r#"{
  "groups": ["api", "batch", "other"],
  "basis": {"sbp": [[1, -1, 0], [1, 1, -1]], "names": ["api-vs-batch", "work-vs-other"]},
  "constraints": [{"name": "mix-cap", "coeffs": {"api": 1.0, "batch": -1.0}, "threshold": 0.6}],
  "health": {"c_min": 0.8, "m_max": 0.5}
}"#;

fn write(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, contents).unwrap();
    path
}

#[test]
fn monitor_accepts_an_empty_observation_stream() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "config.json", CONFIG);
    let obs = write(dir.path(), "observations.jsonl", "");
    let out = dir.path().join("reports.jsonl");
    cmd_monitor(&config, &obs, None, &out).unwrap();
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "");
}

#[test]
fn config_errors_name_the_offending_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(
        dir.path(),
        "config.json",
        &CONFIG.replace(r#""batch": -1.0"#, r#""batch": -0.25"#),
    );
    let obs = write(dir.path(), "observations.jsonl", "");
    let err = cmd_monitor(&config, &obs, None, &dir.path().join("out.jsonl")).unwrap_err();
    let message = err.to_string();
    assert!(
        message.contains("mix-cap"),
        "error should name the constraint: {message}"
    );
    assert_eq!(err.record()["error"], "config");
}

#[test]
fn jsonl_parse_errors_carry_the_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "config.json", CONFIG);
    let obs = write(
        dir.path(),
        "observations.jsonl",
        concat!(
            r#"{"t": 0, "parts": {"api-p0": 5.0, "batch-p0": 3.0, "other-p0": 1.0}}"#,
            "\n",
            r#"{"t": 1, "parts": {"api-p0": 5.0, "batch-p0": 3.0, "other-p0": 1.0}}"#,
            "\n",
            r#"{"t": 2, "parts": "not a map"}"#,
            "\n",
        ),
    );
    let err = cmd_monitor(&config, &obs, None, &dir.path().join("out.jsonl")).unwrap_err();
    let record = err.record();
    assert_eq!(record["error"], "parse");
    assert_eq!(record["line"], 3);
}

#[test]
fn monitor_step_errors_point_at_the_observation_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "config.json", CONFIG);
    // Negative mass is a data error caught by the monitor, not the parser.
    let obs = write(
        dir.path(),
        "observations.jsonl",
        concat!(
            r#"{"t": 0, "parts": {"api-p0": 5.0, "batch-p0": 3.0, "other-p0": 1.0}}"#,
            "\n",
            r#"{"t": 1, "parts": {"api-p0": -5.0, "batch-p0": 3.0, "other-p0": 1.0}}"#,
            "\n",
        ),
    );
    let err = cmd_monitor(&config, &obs, None, &dir.path().join("out.jsonl")).unwrap_err();
    let record = err.record();
    assert_eq!(record["error"], "data");
    assert_eq!(record["line"], 2);
}

#[test]
fn gen_rejects_split_fractions_that_do_not_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write(
        dir.path(),
        "scenario.json",
        &SCENARIO.replace(
            r#""seed": 3"#,
            r#""churn": [{"at": 10, "kind": "split", "args": {"part": "api-p0", "children": [["api-a", 0.5], ["api-b", 0.4]]}}], "seed": 3"#,
        ),
    );
    let err = cmd_gen(&scenario, &dir.path().join("out"), None).unwrap_err();
    assert_eq!(err.record()["error"], "config");
}

#[test]
fn gen_seed_override_changes_the_trace_and_reruns_match() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write(dir.path(), "scenario.json", SCENARIO);
    cmd_gen(&scenario, &dir.path().join("a"), None).unwrap();
    cmd_gen(&scenario, &dir.path().join("b"), Some(99)).unwrap();
    cmd_gen(&scenario, &dir.path().join("c"), Some(99)).unwrap();
    let read = |tag: &str| {
        std::fs::read(dir.path().join(tag).join("observations.jsonl")).unwrap()
    };
    assert_ne!(read("a"), read("b"), "a different seed must change the walk");
    assert_eq!(read("b"), read("c"), "the same seed must reproduce it");
}

#[test]
fn eval_requires_the_truth_file() {
    let dir = tempfile::tempdir().unwrap();
    let reports = write(dir.path(), "reports.jsonl", "");
    let err = cmd_eval(
        &reports,
        &dir.path().join("missing-truth.json"),
        None,
        &dir.path().join("out"),
    )
    .unwrap_err();
    assert_eq!(err.record()["error"], "io");
}

#[test]
fn eval_rejects_reports_that_do_not_cover_the_truth_timeline() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write(dir.path(), "scenario.json", SCENARIO);
    let config = write(dir.path(), "config.json", CONFIG);
    let trace_dir = dir.path().join("trace");
    cmd_gen(&scenario, &trace_dir, None).unwrap();
    let reports = dir.path().join("reports.jsonl");
    cmd_monitor(
        &config,
        &trace_dir.join("observations.jsonl"),
        Some(&trace_dir.join("lineage.jsonl")),
        &reports,
    )
    .unwrap();

    // Drop the last report line; the timelines no longer agree.
    let full = std::fs::read_to_string(&reports).unwrap();
    let trimmed: String = full.lines().take(full.lines().count() - 1).fold(
        String::new(),
        |mut acc, line| {
            acc.push_str(line);
            acc.push('\n');
            acc
        },
    );
    let short = write(dir.path(), "short.jsonl", &trimmed);
    let err = cmd_eval(
        &short,
        &trace_dir.join("truth.json"),
        None,
        &dir.path().join("out"),
    )
    .unwrap_err();
    match err {
        CliError::Data { ref message, .. } => {
            assert!(
                message.contains("timeline mismatch"),
                "unexpected message: {message}"
            );
        }
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn eval_produces_metrics_and_baseline_csv() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write(dir.path(), "scenario.json", SCENARIO);
    let config = write(dir.path(), "config.json", CONFIG);
    let trace_dir = dir.path().join("trace");
    cmd_gen(&scenario, &trace_dir, None).unwrap();
    let reports = dir.path().join("reports.jsonl");
    cmd_monitor(
        &config,
        &trace_dir.join("observations.jsonl"),
        Some(&trace_dir.join("lineage.jsonl")),
        &reports,
    )
    .unwrap();
    let out = dir.path().join("metrics");
    cmd_eval(&reports, &trace_dir.join("truth.json"), None, &out).unwrap();

    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap())
            .unwrap();
    assert!(metrics["delay"]["events"].is_array());
    assert_eq!(metrics["baselines"].as_array().unwrap().len(), 4);

    let csv = std::fs::read_to_string(out.join("baselines.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,method,score,alarm");
    // One row per (timestep, method).
    assert_eq!(csv.lines().count(), 1 + 61 * 4);
}

#[test]
fn binary_prints_a_structured_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_driftwatch"))
        .args([
            "monitor",
            "--config",
            dir.path().join("no-such-config.json").to_str().unwrap(),
            "--in",
            dir.path().join("no-such-obs.jsonl").to_str().unwrap(),
            "--out",
            dir.path().join("reports.jsonl").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let record: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(record["error"], "io");
}

#[test]
fn binary_runs_the_demo_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_driftwatch"))
        .args(["demo-pitfall", "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("demo.csv").is_file());
    assert!(dir.path().join("reports.jsonl").is_file());
}
