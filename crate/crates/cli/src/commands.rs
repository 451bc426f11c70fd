//! The four commands, written as library functions so tests can drive them
//! directly: `gen` (synthetic traces), `monitor` (stream processing),
//! `eval` (metrics against truth), and `demo-pitfall` (the worked example
//! showing where raw-share Euclidean monitoring misleads).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use driftwatch_core::boundary::{LogContrastConstraint, ReferenceParams, SafeSet};
use driftwatch_core::coda::{aitchison_distance, ilr, sbp_to_basis, Composition};
use driftwatch_core::drift::energy;
use driftwatch_core::eval::{
    attribution_fidelity, detection_delay, early_warning, energy_localization, run_baselines,
    shock_statistic, BaselineMethod, BaselineOutcome, DelayStats, EarlyWarningResult, EvalConfig,
    FidelityStats, LocalizationResult, ShockResult,
};
use driftwatch_core::lineage::{CanonicalGroups, HealthThresholds, LineageEvent, LineageEventKind};
use driftwatch_core::monitor::{DriftReport, MonitorConfig, MonitorState, Observation};
use driftwatch_core::synthgen::{generate, Truth};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::formats::{
    float_repr, read_document, read_jsonl, write_document, write_jsonl, ConfigDoc, FormatError,
    ScenarioDoc,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{0}")]
    Config(String),
    #[error("{message}")]
    Data {
        message: String,
        path: Option<String>,
        line: Option<usize>,
    },
}

impl CliError {
    fn data(message: impl Into<String>) -> Self {
        Self::Data {
            message: message.into(),
            path: None,
            line: None,
        }
    }

    fn data_at(message: impl Into<String>, path: &Path, line: usize) -> Self {
        Self::Data {
            message: message.into(),
            path: Some(path.display().to_string()),
            line: Some(line),
        }
    }

    /// A machine-readable error record for stderr.
    pub fn record(&self) -> serde_json::Value {
        match self {
            Self::Format(FormatError::Io { path, source }) => json!({
                "error": "io", "path": path, "message": source.to_string(),
            }),
            Self::Format(FormatError::Line {
                path,
                line,
                message,
            }) => json!({
                "error": "parse", "path": path, "line": line, "message": message,
            }),
            Self::Format(FormatError::Document { path, message }) => json!({
                "error": "parse", "path": path, "message": message,
            }),
            Self::Format(FormatError::Invalid(message)) => json!({
                "error": "config", "message": message,
            }),
            Self::Config(message) => json!({
                "error": "config", "message": message,
            }),
            Self::Data {
                message,
                path,
                line,
            } => json!({
                "error": "data", "path": path, "line": line, "message": message,
            }),
        }
    }
}

/// Generates a labeled trace: `observations.jsonl`, `lineage.jsonl`, and
/// `truth.json` under `out_dir`.
pub fn cmd_gen(
    scenario_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
) -> Result<(), CliError> {
    let doc: ScenarioDoc = read_document(scenario_path)?;
    let mut spec = doc.build()?;
    if let Some(seed) = seed_override {
        spec.seed = seed;
    }
    let trace = generate(&spec).map_err(|e| CliError::Config(e.to_string()))?;
    fs::create_dir_all(out_dir).map_err(|e| {
        CliError::Format(FormatError::Io {
            path: out_dir.display().to_string(),
            source: e,
        })
    })?;
    write_jsonl(&out_dir.join("observations.jsonl"), &trace.observations)?;
    write_jsonl(&out_dir.join("lineage.jsonl"), &trace.lineage)?;
    write_document(&out_dir.join("truth.json"), &trace.truth)?;
    Ok(())
}

/// Streams observations (and lineage events) through the monitor, writing
/// one report line per observation. An empty observation file yields an
/// empty report file and still succeeds.
pub fn cmd_monitor(
    config_path: &Path,
    observations_path: &Path,
    lineage_path: Option<&Path>,
    out_path: &Path,
) -> Result<(), CliError> {
    let doc: ConfigDoc = read_document(config_path)?;
    let config = doc.build()?;
    let mut state = MonitorState::new(config).map_err(|e| CliError::Config(e.to_string()))?;

    let observations: Vec<(usize, Observation)> = read_jsonl(observations_path)?;
    let mut events: Vec<(usize, LineageEvent)> = match lineage_path {
        Some(path) => read_jsonl(path)?,
        None => Vec::new(),
    };
    events.sort_by_key(|(_, e)| e.at);

    let mut reports = Vec::with_capacity(observations.len());
    let mut next_event = 0;
    for (line_no, obs) in &observations {
        let mut due = Vec::new();
        while next_event < events.len() && events[next_event].1.at <= obs.t {
            due.push(events[next_event].1.kind.clone());
            next_event += 1;
        }
        let report = state
            .step(obs, &due)
            .map_err(|e| CliError::data_at(e.to_string(), observations_path, *line_no))?;
        reports.push(report);
    }
    write_jsonl(out_path, &reports)?;
    Ok(())
}

/// The metrics summary written by `cmd_eval`.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsDoc {
    pub config: EvalConfig,
    pub delay: DelayStats,
    pub fidelity: FidelityStats,
    pub h1: Option<ShockResult>,
    pub h1_note: Option<String>,
    pub h2: Option<EarlyWarningResult>,
    pub h2_note: Option<String>,
    pub h3: Option<LocalizationResult>,
    pub h3_note: Option<String>,
    pub baselines: Vec<BaselineSummary>,
    pub baselines_note: Option<String>,
}

/// Per-method calibrated comparison row.
#[derive(Debug, Clone, Serialize)]
pub struct BaselineSummary {
    pub method: BaselineMethod,
    pub threshold: f64,
    /// Timesteps whose score exceeded the threshold.
    pub alarm_ts: Vec<i64>,
    /// Alarms landing inside stationary segments (false alarms).
    pub stationary_alarms: usize,
}

/// Scores a report stream against generated truth, writing `metrics.json`
/// and a per-method `baselines.csv` under `out_dir`.
pub fn cmd_eval(
    reports_path: &Path,
    truth_path: &Path,
    eval_config: Option<EvalConfig>,
    out_dir: &Path,
) -> Result<(), CliError> {
    let config = eval_config.unwrap_or_default();
    let reports: Vec<DriftReport> = read_jsonl(reports_path)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let truth: Truth = read_document(truth_path)?;

    let horizon = truth.noiseless_z.len() as i64 - 1;
    let got: Vec<i64> = reports.iter().map(|r| r.t).collect();
    let expected: Vec<i64> = (0..=horizon).collect();
    if got != expected {
        return Err(CliError::data(format!(
            "timeline mismatch: reports cover t in [{:?}..{:?}] ({} records) but truth describes t in [0..{horizon}]",
            got.first(),
            got.last(),
            got.len()
        )));
    }

    let delay = detection_delay(
        &reports,
        &truth.crossings,
        &truth.degenerate,
        config.alarm_rule,
        config.pre_window,
    );
    let fidelity = attribution_fidelity(&reports, &truth.segments, config.top_k);

    // Balance displacements as the monitor saw them.
    let deltas: Vec<Vec<f64>> = reports
        .windows(2)
        .map(|pair| {
            pair[1]
                .balances
                .iter()
                .zip(&pair[0].balances)
                .map(|(b, a)| b - a)
                .collect()
        })
        .collect();

    // Transition index ranges per truth segment (transition i moves t=i to
    // t=i+1).
    let first_drifting = truth.segments.iter().find(|s| !s.stationary);
    let stationary_prefix_len: usize = truth
        .segments
        .iter()
        .take_while(|s| s.stationary)
        .map(|s| s.len)
        .sum();

    let (h1, h1_note) = match first_drifting {
        None => (None, Some("no drifting segment in truth".to_string())),
        Some(seg) => {
            let shock_start = seg.start as usize;
            let shock_end = (shock_start + config.shock_len).min(deltas.len());
            match shock_statistic(
                &deltas,
                0..stationary_prefix_len.min(shock_start),
                shock_start..shock_end,
                config.shock_len,
                config.h1_quantile,
            ) {
                Ok(res) => (Some(res), None),
                Err(e) => (None, Some(e.to_string())),
            }
        }
    };

    let first_crossing = truth
        .crossings
        .iter()
        .filter(|(name, _)| !truth.degenerate.contains(name))
        .map(|(_, t)| *t)
        .min();
    let (h2, h2_note) = match first_crossing {
        None => (None, Some("no boundary crossing in truth".to_string())),
        Some(t_c) => match early_warning(
            &reports,
            t_c,
            config.alarm_rule,
            config.pre_window,
            config.trend_method,
        ) {
            Ok(res) => (Some(res), None),
            Err(e) => (None, Some(e.to_string())),
        },
    };

    let (h3, h3_note) = match first_drifting {
        None => (None, Some("no drifting segment in truth".to_string())),
        Some(seg) => {
            let start = seg.start as usize;
            let end = (start + seg.len).min(deltas.len());
            match energy(&deltas[start..end]).map_err(|e| e.to_string()).and_then(|profile| {
                energy_localization(
                    &profile,
                    config.top_k,
                    config.h3_random_bases,
                    config.h3_share_target,
                    config.seed,
                )
                .map_err(|e| e.to_string())
            }) {
                Ok(res) => (Some(res), None),
                Err(e) => (None, Some(e)),
            }
        }
    };

    // Group-share series for the naive detectors, in sorted-key order.
    let shares: Vec<Vec<f64>> = reports
        .iter()
        .map(|r| r.shares.values().copied().collect())
        .collect();
    let group_ids: Vec<String> = reports
        .first()
        .map(|r| r.shares.keys().cloned().collect())
        .unwrap_or_default();
    let window = config.pre_window.max(1) as usize;
    let calibration: Vec<Vec<Vec<f64>>> = shares[..stationary_prefix_len.min(shares.len())]
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| c.to_vec())
        .collect();

    let stationary_t = |t: i64| -> bool {
        truth
            .segments
            .iter()
            .any(|s| s.stationary && t >= s.start && t < s.start + s.len as i64)
    };

    let (baselines, baselines_note, outcomes) = if calibration.is_empty() {
        (
            Vec::new(),
            Some("stationary prefix too short to calibrate".to_string()),
            Vec::new(),
        )
    } else {
        let basis = sbp_to_basis(&truth.basis_sbp, &truth.basis_names)
            .map_err(|e| CliError::data(format!("truth basis: {e}")))?;
        let outcomes = run_baselines(
            &[
                BaselineMethod::EuclideanShares,
                BaselineMethod::PerPartEwma,
                BaselineMethod::PairwiseLogRatioEwma,
                BaselineMethod::AitchisonDistance,
            ],
            &shares,
            &calibration,
            0.2,
            config.calibration_target,
            Some((&basis, &group_ids)),
        )
        .map_err(|e| CliError::data(e.to_string()))?;
        let summaries = outcomes
            .iter()
            .map(|o| {
                let alarm_ts: Vec<i64> = o.alarm_steps.iter().map(|&i| reports[i].t).collect();
                let stationary_alarms =
                    alarm_ts.iter().filter(|&&t| stationary_t(t)).count();
                BaselineSummary {
                    method: o.method,
                    threshold: o.threshold,
                    alarm_ts,
                    stationary_alarms,
                }
            })
            .collect();
        (summaries, None, outcomes)
    };

    let metrics = MetricsDoc {
        config,
        delay,
        fidelity,
        h1,
        h1_note,
        h2,
        h2_note,
        h3,
        h3_note,
        baselines,
        baselines_note,
    };
    fs::create_dir_all(out_dir).map_err(|e| {
        CliError::Format(FormatError::Io {
            path: out_dir.display().to_string(),
            source: e,
        })
    })?;
    write_document(&out_dir.join("metrics.json"), &metrics)?;
    write_baseline_csv(&out_dir.join("baselines.csv"), &reports, &outcomes)?;
    Ok(())
}

fn write_baseline_csv(
    path: &Path,
    reports: &[DriftReport],
    outcomes: &[BaselineOutcome],
) -> Result<(), CliError> {
    let mut text = String::from("t,method,score,alarm\n");
    for outcome in outcomes {
        let method = serde_json::to_value(outcome.method)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        for (i, score) in outcome.scores.iter().enumerate() {
            let alarm = outcome.alarm_steps.contains(&i);
            let _ = writeln!(
                text,
                "{},{},{},{}",
                reports[i].t,
                method,
                float_repr(*score),
                alarm
            );
        }
    }
    fs::write(path, text).map_err(|e| {
        CliError::Format(FormatError::Io {
            path: path.display().to_string(),
            source: e,
        })
    })?;
    Ok(())
}

/// The worked three-point example: a recomposition that a raw-share
/// Euclidean detector flags loudly while the feature-to-reliability mix is
/// untouched, and a ratio breach the same detector misses entirely.
///
/// Writes `demo.csv` (ternary coordinates, balances, both distance metrics,
/// constraint margins) and `reports.jsonl` under `out_dir`.
pub fn cmd_demo_pitfall(out_dir: &Path) -> Result<(), CliError> {
    let parts = ["feature", "reliability", "other"];
    let points: [(&str, [f64; 3]); 3] = [
        ("base", [0.33, 0.33, 0.34]),
        ("recomposition", [0.44, 0.44, 0.12]),
        ("ratio-breach", [0.45, 0.23, 0.32]),
    ];
    let basis = sbp_to_basis(
        &[vec![1, -1, 0], vec![1, 1, -1]],
        &[
            "feature-vs-reliability".to_string(),
            "work-vs-other".to_string(),
        ],
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let mut coeffs = BTreeMap::new();
    coeffs.insert("feature".to_string(), 1.0);
    coeffs.insert("reliability".to_string(), -1.0);
    let cap = LogContrastConstraint::new("feature-reliability-cap", coeffs, 1.5_f64.ln())
        .map_err(|e| CliError::Config(e.to_string()))?;

    let groups = CanonicalGroups::new(parts.iter().map(|p| p.to_string()).collect())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let safe_set =
        SafeSet::new(vec![cap], false).map_err(|e| CliError::Config(e.to_string()))?;
    let mut config = MonitorConfig::new(groups, basis.clone(), safe_set);
    // The third share sits at 0.34, far above the default "other" gate, and
    // the reference must lock onto the first point immediately.
    config.health = HealthThresholds {
        c_min: 0.8,
        m_max: 0.5,
    };
    config.reference = ReferenceParams {
        warm_up: 1,
        rate: 0.0,
    };
    let mut state = MonitorState::new(config).map_err(|e| CliError::Config(e.to_string()))?;

    // Each observed part is its own group here; declare that up front so
    // nothing falls into the catch-all.
    let bootstrap: Vec<LineageEventKind> = parts
        .iter()
        .map(|p| LineageEventKind::Add {
            part: p.to_string(),
            group: Some(p.to_string()),
        })
        .collect();

    let mut reports = Vec::new();
    for (t, (_, values)) in points.iter().enumerate() {
        let mut obs_parts = BTreeMap::new();
        for (id, v) in parts.iter().zip(values) {
            obs_parts.insert(id.to_string(), *v);
        }
        let events: &[LineageEventKind] = if t == 0 { &bootstrap } else { &[] };
        let report = state
            .step(
                &Observation {
                    t: t as i64,
                    parts: obs_parts,
                    confidence: 1.0,
                    freeze: false,
                },
                events,
            )
            .map_err(|e| CliError::data(e.to_string()))?;
        reports.push(report);
    }

    let compositions: Vec<Composition> = points
        .iter()
        .map(|(_, values)| {
            Composition::closure(
                parts
                    .iter()
                    .map(|p| p.to_string())
                    .zip(values.iter().copied()),
            )
            .map_err(|e| CliError::Config(e.to_string()))
        })
        .collect::<Result<_, _>>()?;

    let mut csv = String::from(
        "label,t,feature,reliability,other,ternary_x,ternary_y,\
         feature_vs_reliability,work_vs_other,euclidean_from_base,\
         aitchison_from_base,feature_reliability_ratio,cap_margin,violated\n",
    );
    for (t, ((label, _), comp)) in points.iter().zip(&compositions).enumerate() {
        let v = comp.values();
        let (f, r, o) = (v[0], v[1], v[2]);
        let z = ilr(comp, &basis).map_err(|e| CliError::Config(e.to_string()))?;
        let euclid = {
            let b = compositions[0].values();
            v.iter()
                .zip(b)
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>()
                .sqrt()
        };
        let aitch = aitchison_distance(&compositions[0], comp, &basis)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let margin = (f / r).ln() - 1.5_f64.ln();
        let _ = writeln!(
            csv,
            "{label},{t},{},{},{},{},{},{},{},{},{},{},{},{}",
            float_repr(f),
            float_repr(r),
            float_repr(o),
            float_repr(r + 0.5 * o),
            float_repr(3.0_f64.sqrt() / 2.0 * o),
            float_repr(z.coords[0]),
            float_repr(z.coords[1]),
            float_repr(euclid),
            float_repr(aitch),
            float_repr(f / r),
            float_repr(margin),
            margin > 0.0
        );
    }

    fs::create_dir_all(out_dir).map_err(|e| {
        CliError::Format(FormatError::Io {
            path: out_dir.display().to_string(),
            source: e,
        })
    })?;
    fs::write(out_dir.join("demo.csv"), csv).map_err(|e| {
        CliError::Format(FormatError::Io {
            path: out_dir.join("demo.csv").display().to_string(),
            source: e,
        })
    })?;
    write_jsonl(&out_dir.join("reports.jsonl"), &reports)?;
    Ok(())
}
