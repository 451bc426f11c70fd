//! Evaluation harness: scoring monitor output against generated truth.
//!
//! Covers four jobs:
//!
//! 1. **Operational metrics** — detection delay against labeled boundary
//!    crossings (with a pre-event window so early warnings count as leads,
//!    not errors), false-alarm rates over stationary windows, and
//!    attribution fidelity against the injected drift direction.
//! 2. **Hypothesis statistics** — the shock statistic (mean displacement
//!    norm against a baseline quantile), monotone trend tests on the
//!    distance signal, and energy localization against a random-rotation
//!    baseline.
//! 3. **Naive baselines** — the detectors a team would reach for first
//!    (raw-share Euclidean distance, per-part EWMA z-scores, pairwise
//!    log-ratio z-scores), all calibrated to a matched false-alarm budget so
//!    comparisons are fair.
//! 4. **Threshold calibration** — quantile thresholds from per-window
//!    maximum scores on stationary calibration data.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coda::{ilr, CodaError, Composition, ContrastBasis};
use crate::drift::{DriftError, EnergyProfile};
use crate::monitor::{DriftReport, WarningLevel};
use crate::stats::{quantile, slope_test, StatsError, TrendTest};
use crate::synthgen::TruthSegment;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid range: {0}")]
    BadRange(String),
    #[error("shock window has {got} samples; need at least {need}")]
    ShockTooShort { need: usize, got: usize },
    #[error("calibration infeasible: {0}")]
    CalibrationInfeasible(String),
    #[error("displacement energy is zero; localization is undefined")]
    DegenerateEnergy,
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Coda(#[from] CodaError),
}

/// Which report field constitutes "the monitor raised an alarm".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmRule {
    /// Boundary-imminence alert (crossing within the configured number of
    /// smoothed steps).
    Imminence,
    /// Distance warning at level `warn` or above.
    WarningLevel,
}

/// Whether a report counts as an alarm under the rule.
pub fn is_alarm(report: &DriftReport, rule: AlarmRule) -> bool {
    match rule {
        AlarmRule::Imminence => report
            .imminence
            .as_ref()
            .is_some_and(|imm| imm.alert),
        AlarmRule::WarningLevel => report.warning.level >= WarningLevel::Warn,
    }
}

/// Which trend test to run on the distance signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendMethod {
    MannKendall,
    LeastSquaresSlope,
}

/// Runs the configured monotone-trend test.
pub fn trend_test(series: &[f64], method: TrendMethod) -> Result<TrendTest, EvalError> {
    let test = match method {
        TrendMethod::MannKendall => crate::stats::mann_kendall(series)?,
        TrendMethod::LeastSquaresSlope => slope_test(series)?,
    };
    Ok(test)
}

/// Harness-wide tuning. Fields omitted from a serialized document fall back
/// to their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub alarm_rule: AlarmRule,
    /// Alarms up to this many steps before a labeled crossing are leads.
    pub pre_window: i64,
    /// Required median lead (steps before crossing) for early warning.
    pub min_lead: i64,
    /// Sliding-window length for the shock statistic.
    pub shock_len: usize,
    pub trend_method: TrendMethod,
    pub trend_alpha: f64,
    /// Balances compared in attribution fidelity.
    pub top_k: usize,
    /// Quantile of baseline window norms the shock must exceed.
    pub h1_quantile: f64,
    /// Random rotations behind the localization baseline.
    pub h3_random_bases: usize,
    /// Required top-balance energy share, in percent.
    pub h3_share_target: f64,
    /// Per-window false-alarm budget used when calibrating thresholds.
    pub calibration_target: f64,
    /// Seed for the harness's own randomness (rotations).
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alarm_rule: AlarmRule::Imminence,
            pre_window: 15,
            min_lead: 1,
            shock_len: 10,
            trend_method: TrendMethod::MannKendall,
            trend_alpha: 0.05,
            top_k: 3,
            h1_quantile: 0.95,
            h3_random_bases: 100,
            h3_share_target: 80.0,
            calibration_target: 0.05,
            seed: 7,
        }
    }
}

/// Outcome for one labeled crossing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventDelay {
    pub constraint: String,
    pub crossing_t: i64,
    /// First alarm inside the event's window, if any.
    pub alarm_t: Option<i64>,
    /// `alarm_t - crossing_t`; negative values are early warnings.
    pub delay: Option<i64>,
    pub missed: bool,
}

/// Detection-delay summary over all labeled crossings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayStats {
    pub events: Vec<EventDelay>,
    pub median_delay: Option<f64>,
    /// Median of `crossing_t - alarm_t` over detected events (positive =
    /// alarm preceded the crossing).
    pub median_lead: Option<f64>,
    /// Alarm steps outside every event window.
    pub false_alarm_steps: usize,
}

/// Scores alarms against labeled crossings.
///
/// An event's window opens `pre_window` steps before its crossing and closes
/// where the next event's window opens (or at the end of the trace). The
/// first alarm in the window is the detection; alarms before any window are
/// false alarms, not negative delays. Constraints listed in `degenerate`
/// (violated from the start) are skipped.
pub fn detection_delay(
    reports: &[DriftReport],
    crossings: &BTreeMap<String, i64>,
    degenerate: &[String],
    rule: AlarmRule,
    pre_window: i64,
) -> DelayStats {
    let mut events: Vec<(String, i64)> = crossings
        .iter()
        .filter(|(name, _)| !degenerate.contains(name))
        .map(|(name, t)| (name.clone(), *t))
        .collect();
    events.sort_by_key(|(_, t)| *t);

    let alarm_ts: Vec<i64> = reports
        .iter()
        .filter(|r| is_alarm(r, rule))
        .map(|r| r.t)
        .collect();
    let horizon = reports.last().map(|r| r.t).unwrap_or(i64::MIN);

    let mut out = Vec::with_capacity(events.len());
    let mut covered: Vec<(i64, i64)> = Vec::new();
    for (i, (name, t_c)) in events.iter().enumerate() {
        let open = t_c - pre_window;
        let close = events
            .get(i + 1)
            .map(|(_, next)| next - pre_window - 1)
            .unwrap_or(horizon);
        covered.push((open, close));
        let alarm_t = alarm_ts
            .iter()
            .find(|t| (open..=close).contains(t))
            .copied();
        out.push(EventDelay {
            constraint: name.clone(),
            crossing_t: *t_c,
            alarm_t,
            delay: alarm_t.map(|a| a - t_c),
            missed: alarm_t.is_none(),
        });
    }
    let false_alarm_steps = alarm_ts
        .iter()
        .filter(|t| !covered.iter().any(|(open, close)| (*open..=*close).contains(t)))
        .count();

    let delays: Vec<f64> = out.iter().filter_map(|e| e.delay).map(|d| d as f64).collect();
    let leads: Vec<f64> = out
        .iter()
        .filter_map(|e| e.delay)
        .map(|d| -d as f64)
        .collect();
    DelayStats {
        median_delay: if delays.is_empty() {
            None
        } else {
            Some(crate::stats::median(&delays))
        },
        median_lead: if leads.is_empty() {
            None
        } else {
            Some(crate::stats::median(&leads))
        },
        events: out,
        false_alarm_steps,
    }
}

/// False-alarm summary over independent stationary windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalseAlarmStats {
    pub windows: usize,
    pub windows_with_alarm: usize,
    pub rate: f64,
}

/// Fraction of stationary windows containing at least one alarm.
pub fn false_alarm_rate(windows: &[Vec<DriftReport>], rule: AlarmRule) -> FalseAlarmStats {
    let total = windows.len();
    let with_alarm = windows
        .iter()
        .filter(|w| w.iter().any(|r| is_alarm(r, rule)))
        .count();
    FalseAlarmStats {
        windows: total,
        windows_with_alarm: with_alarm,
        rate: if total == 0 {
            0.0
        } else {
            with_alarm as f64 / total as f64
        },
    }
}

/// Attribution-fidelity summary over drifting segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityStats {
    pub evaluated: usize,
    pub hits: usize,
    pub fidelity: f64,
}

/// Checks, per drifting segment, that the dominant injected balance appears
/// among the top-`k` balances of the last attribution in the segment.
/// Segments with no usable attribution count as misses.
pub fn attribution_fidelity(
    reports: &[DriftReport],
    segments: &[TruthSegment],
    k: usize,
) -> FidelityStats {
    if k == 0 {
        // No reported set can cover anything.
        return FidelityStats {
            evaluated: segments.iter().filter(|s| !s.stationary).count(),
            hits: 0,
            fidelity: 0.0,
        };
    }
    let mut evaluated = 0usize;
    let mut hits = 0usize;
    for seg in segments {
        if seg.stationary {
            continue;
        }
        evaluated += 1;
        let max_mag = seg
            .direction
            .iter()
            .map(|c| c.abs())
            .fold(0.0_f64, f64::max);
        if max_mag == 0.0 {
            continue;
        }
        let dominant: Vec<usize> = seg
            .direction
            .iter()
            .enumerate()
            .filter(|(_, c)| c.abs() >= max_mag - 1e-12)
            .map(|(i, _)| i)
            .collect();
        let end = seg.start + seg.len as i64;
        let last_att = reports
            .iter()
            .rev()
            .filter(|r| r.t > seg.start && r.t <= end)
            .find_map(|r| r.attribution.as_ref().filter(|a| !a.no_drift));
        if let Some(att) = last_att {
            let top: Vec<usize> = att.entries.iter().take(k).map(|e| e.index).collect();
            if dominant.iter().all(|d| top.contains(d)) {
                hits += 1;
            }
        }
    }
    FidelityStats {
        evaluated,
        hits,
        fidelity: if evaluated == 0 {
            1.0
        } else {
            hits as f64 / evaluated as f64
        },
    }
}

/// Shock-statistic outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockResult {
    /// Norm of the mean displacement over the shock window.
    pub statistic: f64,
    /// Baseline quantile of sliding-window mean-displacement norms.
    pub threshold: f64,
    pub exceeds: bool,
}

/// Compares the mean displacement over `shock` against the `q`-quantile of
/// sliding windows of length `window` in the `baseline` range. Both ranges
/// index into `deltas`.
pub fn shock_statistic(
    deltas: &[Vec<f64>],
    baseline: std::ops::Range<usize>,
    shock: std::ops::Range<usize>,
    window: usize,
    q: f64,
) -> Result<ShockResult, EvalError> {
    if window == 0 {
        return Err(EvalError::BadRange("window length must be positive".into()));
    }
    if baseline.end > deltas.len() || shock.end > deltas.len() {
        return Err(EvalError::BadRange(format!(
            "ranges exceed the {} available displacement samples",
            deltas.len()
        )));
    }
    if shock.len() < window {
        return Err(EvalError::ShockTooShort {
            need: window,
            got: shock.len(),
        });
    }
    if baseline.len() < window {
        return Err(EvalError::BadRange(format!(
            "baseline has {} samples; need at least the window length {window}",
            baseline.len()
        )));
    }
    let mean_norm = |range: std::ops::Range<usize>| -> f64 {
        let dim = deltas[range.start].len();
        let mut mean = vec![0.0; dim];
        for dz in &deltas[range.clone()] {
            for (m, v) in mean.iter_mut().zip(dz) {
                *m += v;
            }
        }
        let n = range.len() as f64;
        mean.iter().map(|m| (m / n) * (m / n)).sum::<f64>().sqrt()
    };
    let statistic = mean_norm(shock.clone());
    let mut norms = Vec::new();
    for start in baseline.start..=baseline.end - window {
        norms.push(mean_norm(start..start + window));
    }
    let threshold = quantile(&norms, q);
    Ok(ShockResult {
        statistic,
        threshold,
        exceeds: statistic > threshold,
    })
}

/// Localization outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    /// Share of total displacement energy in the top-`k` balances (percent).
    pub top_share_pct: f64,
    /// Mean of the same share under random orthonormal bases (percent).
    pub random_share_pct: f64,
    pub satisfied: bool,
}

/// How concentrated the displacement energy is in its top-`k` balances,
/// compared with the expected concentration under `n_bases` random
/// orthonormal coordinate systems (computed through the window's
/// second-moment matrix).
pub fn energy_localization(
    profile: &EnergyProfile,
    k: usize,
    n_bases: usize,
    share_target_pct: f64,
    seed: u64,
) -> Result<LocalizationResult, EvalError> {
    let dim = profile.dim();
    if dim == 0 || profile.steps == 0 {
        return Err(EvalError::EmptyInput("energy profile".into()));
    }
    let total = profile.total();
    if total <= 0.0 {
        return Err(EvalError::DegenerateEnergy);
    }
    let k = k.clamp(1, dim);
    let top_share = |energies: &[f64]| -> f64 {
        let mut sorted = energies.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        sorted.iter().take(k).sum::<f64>() / total * 100.0
    };
    let top_share_pct = top_share(&profile.energy);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..n_bases.max(1) {
        let q = random_orthonormal(dim, &mut rng);
        // Rotated energies: diag(Q M Q^T).
        let mut energies = vec![0.0; dim];
        for (e, row) in energies.iter_mut().zip(&q) {
            let mut v = 0.0;
            for (i, &ri) in row.iter().enumerate() {
                for (j, &rj) in row.iter().enumerate() {
                    v += ri * profile.second_moment[i][j] * rj;
                }
            }
            *e = v.max(0.0);
        }
        acc += top_share(&energies);
    }
    let random_share_pct = acc / n_bases.max(1) as f64;
    Ok(LocalizationResult {
        top_share_pct,
        random_share_pct,
        satisfied: top_share_pct >= share_target_pct && top_share_pct > random_share_pct,
    })
}

/// A Haar-ish random rotation via Gram-Schmidt on a Gaussian matrix.
fn random_orthonormal(dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    loop {
        let mut rows: Vec<Vec<f64>> = (0..dim)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let mut ok = true;
        for i in 0..dim {
            for j in 0..i {
                let proj: f64 = rows[i]
                    .iter()
                    .zip(&rows[j])
                    .map(|(a, b)| a * b)
                    .sum();
                let (left, right) = rows.split_at_mut(i);
                for (v, w) in right[0].iter_mut().zip(&left[j]) {
                    *v -= proj * w;
                }
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-10 {
                ok = false;
                break;
            }
            for v in rows[i].iter_mut() {
                *v /= norm;
            }
        }
        if ok {
            return rows;
        }
    }
}

/// Early-warning outcome ahead of one crossing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyWarningResult {
    pub trend: TrendTest,
    pub alarm_t: Option<i64>,
    /// `crossing_t - alarm_t` when an alarm preceded (or met) the crossing.
    pub lead: Option<i64>,
}

/// Examines the window before a labeled crossing: is the distance signal in
/// a significant rising trend, and how much lead did the first alarm give?
pub fn early_warning(
    reports: &[DriftReport],
    crossing_t: i64,
    rule: AlarmRule,
    pre_window: i64,
    method: TrendMethod,
) -> Result<EarlyWarningResult, EvalError> {
    let open = crossing_t - pre_window;
    let window: Vec<&DriftReport> = reports
        .iter()
        .filter(|r| r.t >= open && r.t < crossing_t)
        .collect();
    let distances: Vec<f64> = window
        .iter()
        .filter_map(|r| r.warning.distance)
        .collect();
    let trend = trend_test(&distances, method)?;
    let alarm_t = window.iter().find(|r| is_alarm(r, rule)).map(|r| r.t);
    Ok(EarlyWarningResult {
        trend,
        alarm_t,
        lead: alarm_t.map(|a| crossing_t - a),
    })
}

/// Quantile threshold from per-window maximum scores on stationary
/// calibration data: a window alarms iff its max score exceeds the
/// threshold, so the expected window false-alarm rate is `target`.
pub fn calibrate_threshold(window_max_scores: &[f64], target: f64) -> Result<f64, EvalError> {
    if window_max_scores.is_empty() {
        return Err(EvalError::CalibrationInfeasible(
            "no calibration windows".into(),
        ));
    }
    if !(0.0..1.0).contains(&target) {
        return Err(EvalError::CalibrationInfeasible(format!(
            "target rate {target} outside [0, 1)"
        )));
    }
    Ok(quantile(window_max_scores, 1.0 - target))
}

/// The naive detectors used for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    /// Euclidean distance between raw share vectors and a fixed reference.
    EuclideanShares,
    /// Max per-part z-score of an EWMA of raw shares.
    PerPartEwma,
    /// Max z-score over EWMAs of all pairwise log-ratios.
    PairwiseLogRatioEwma,
    /// Aitchison distance to a fixed reference (the geometry-aware
    /// comparison point, calibrated identically).
    AitchisonDistance,
}

const SD_FLOOR: f64 = 1e-12;

/// A fitted score function over share vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum BaselineDetector {
    Euclidean {
        reference: Vec<f64>,
    },
    PerPartEwma {
        lambda: f64,
        mean: Vec<f64>,
        sd: Vec<f64>,
    },
    PairwiseLogRatioEwma {
        lambda: f64,
        mean: Vec<f64>,
        sd: Vec<f64>,
    },
    Aitchison {
        reference_coords: Vec<f64>,
        basis: ContrastBasis,
        part_ids: Vec<String>,
    },
}

impl BaselineDetector {
    pub fn method(&self) -> BaselineMethod {
        match self {
            Self::Euclidean { .. } => BaselineMethod::EuclideanShares,
            Self::PerPartEwma { .. } => BaselineMethod::PerPartEwma,
            Self::PairwiseLogRatioEwma { .. } => BaselineMethod::PairwiseLogRatioEwma,
            Self::Aitchison { .. } => BaselineMethod::AitchisonDistance,
        }
    }

    /// Fits a detector of the given kind on stationary calibration shares.
    pub fn fit(
        method: BaselineMethod,
        calibration: &[Vec<f64>],
        lambda: f64,
        basis: Option<(&ContrastBasis, &[String])>,
    ) -> Result<Self, EvalError> {
        let Some(first) = calibration.first() else {
            return Err(EvalError::CalibrationInfeasible(
                "no calibration samples".into(),
            ));
        };
        let dim = first.len();
        if calibration.iter().any(|x| x.len() != dim) {
            return Err(EvalError::CalibrationInfeasible(
                "calibration samples have mixed dimensions".into(),
            ));
        }
        match method {
            BaselineMethod::EuclideanShares => {
                Ok(Self::Euclidean {
                    reference: column_means(calibration),
                })
            }
            BaselineMethod::PerPartEwma => {
                let smoothed = ewma_series(calibration, lambda);
                let (mean, sd) = column_stats(&smoothed);
                Ok(Self::PerPartEwma { lambda, mean, sd })
            }
            BaselineMethod::PairwiseLogRatioEwma => {
                let ratios: Vec<Vec<f64>> =
                    calibration.iter().map(|x| pairwise_log_ratios(x)).collect();
                let smoothed = ewma_series(&ratios, lambda);
                let (mean, sd) = column_stats(&smoothed);
                Ok(Self::PairwiseLogRatioEwma { lambda, mean, sd })
            }
            BaselineMethod::AitchisonDistance => {
                let Some((basis, ids)) = basis else {
                    return Err(EvalError::CalibrationInfeasible(
                        "the Aitchison detector needs a basis and part ids".into(),
                    ));
                };
                let mut coords = Vec::with_capacity(calibration.len());
                for x in calibration {
                    coords.push(shares_to_coords(x, basis, ids)?);
                }
                Ok(Self::Aitchison {
                    reference_coords: column_means(&coords),
                    basis: basis.clone(),
                    part_ids: ids.to_vec(),
                })
            }
        }
    }

    /// Scores a share series, one score per sample. EWMA detectors start
    /// from their calibrated mean so the first samples are not transients.
    pub fn scores(&self, shares: &[Vec<f64>]) -> Result<Vec<f64>, EvalError> {
        match self {
            Self::Euclidean { reference } => shares
                .iter()
                .map(|x| {
                    if x.len() != reference.len() {
                        return Err(EvalError::BadRange(
                            "share vector does not match the fitted dimension".into(),
                        ));
                    }
                    Ok(x.iter()
                        .zip(reference)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt())
                })
                .collect(),
            Self::PerPartEwma { lambda, mean, sd } => {
                let mut state = mean.clone();
                let mut out = Vec::with_capacity(shares.len());
                for x in shares {
                    if x.len() != mean.len() {
                        return Err(EvalError::BadRange(
                            "share vector does not match the fitted dimension".into(),
                        ));
                    }
                    let mut worst = 0.0_f64;
                    for ((s, v), (m, d)) in
                        state.iter_mut().zip(x).zip(mean.iter().zip(sd))
                    {
                        *s = (1.0 - lambda) * *s + lambda * v;
                        worst = worst.max((*s - m).abs() / d.max(SD_FLOOR));
                    }
                    out.push(worst);
                }
                Ok(out)
            }
            Self::PairwiseLogRatioEwma { lambda, mean, sd } => {
                let mut state = mean.clone();
                let mut out = Vec::with_capacity(shares.len());
                for x in shares {
                    let ratios = pairwise_log_ratios(x);
                    if ratios.len() != mean.len() {
                        return Err(EvalError::BadRange(
                            "share vector does not match the fitted dimension".into(),
                        ));
                    }
                    let mut worst = 0.0_f64;
                    for ((s, v), (m, d)) in
                        state.iter_mut().zip(&ratios).zip(mean.iter().zip(sd))
                    {
                        *s = (1.0 - lambda) * *s + lambda * v;
                        worst = worst.max((*s - m).abs() / d.max(SD_FLOOR));
                    }
                    out.push(worst);
                }
                Ok(out)
            }
            Self::Aitchison {
                reference_coords,
                basis,
                part_ids,
            } => shares
                .iter()
                .map(|x| {
                    let coords = shares_to_coords(x, basis, part_ids)?;
                    Ok(coords
                        .iter()
                        .zip(reference_coords)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt())
                })
                .collect(),
        }
    }
}

fn shares_to_coords(
    x: &[f64],
    basis: &ContrastBasis,
    ids: &[String],
) -> Result<Vec<f64>, EvalError> {
    if x.len() != ids.len() {
        return Err(EvalError::BadRange(
            "share vector does not match the part ids".into(),
        ));
    }
    let comp = Composition::closure(ids.iter().cloned().zip(x.iter().copied()))?;
    Ok(ilr(&comp, basis)?.coords)
}

fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = rows.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = rows.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let mean = column_means(rows);
    let dim = mean.len();
    let mut var = vec![0.0; dim];
    for row in rows {
        for ((v, m), x) in var.iter_mut().zip(&mean).zip(row) {
            *v += (x - m) * (x - m);
        }
    }
    let n = rows.len().max(1) as f64;
    let sd = var.iter().map(|v| (v / n).sqrt()).collect();
    (mean, sd)
}

fn ewma_series(rows: &[Vec<f64>], lambda: f64) -> Vec<Vec<f64>> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let mut state = first.clone();
    let mut out = Vec::with_capacity(rows.len());
    out.push(state.clone());
    for row in &rows[1..] {
        for (s, v) in state.iter_mut().zip(row) {
            *s = (1.0 - lambda) * *s + lambda * v;
        }
        out.push(state.clone());
    }
    out
}

/// All pairwise `log(x_i / x_j)` for `i < j`.
fn pairwise_log_ratios(x: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = x
        .iter()
        .map(|v| v.max(crate::coda::VALUE_FLOOR).ln())
        .collect();
    let mut out = Vec::with_capacity(logs.len() * (logs.len() - 1) / 2);
    for i in 0..logs.len() {
        for j in i + 1..logs.len() {
            out.push(logs[i] - logs[j]);
        }
    }
    out
}

/// A calibrated detector with its scores and alarms on an evaluation series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOutcome {
    pub method: BaselineMethod,
    pub threshold: f64,
    pub scores: Vec<f64>,
    /// Sample indices whose score exceeded the threshold.
    pub alarm_steps: Vec<usize>,
}

/// Fits, calibrates, and runs the given detectors.
///
/// Detectors are fitted on the concatenated calibration windows; each
/// threshold is the `(1 - target)` quantile of that detector's per-window
/// maximum score, so every method operates at the same expected window
/// false-alarm rate.
pub fn run_baselines(
    methods: &[BaselineMethod],
    eval_shares: &[Vec<f64>],
    calibration_windows: &[Vec<Vec<f64>>],
    lambda: f64,
    target: f64,
    basis: Option<(&ContrastBasis, &[String])>,
) -> Result<Vec<BaselineOutcome>, EvalError> {
    if calibration_windows.is_empty() || calibration_windows.iter().any(|w| w.is_empty()) {
        return Err(EvalError::CalibrationInfeasible(
            "calibration windows must be non-empty".into(),
        ));
    }
    let fit_data: Vec<Vec<f64>> = calibration_windows
        .iter()
        .flat_map(|w| w.iter().cloned())
        .collect();
    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        let detector = BaselineDetector::fit(method, &fit_data, lambda, basis)?;
        let mut max_scores = Vec::with_capacity(calibration_windows.len());
        for window in calibration_windows {
            let scores = detector.scores(window)?;
            max_scores.push(scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
        let threshold = calibrate_threshold(&max_scores, target)?;
        let scores = detector.scores(eval_shares)?;
        let alarm_steps = scores
            .iter()
            .enumerate()
            .filter(|(_, s)| **s > threshold)
            .map(|(i, _)| i)
            .collect();
        out.push(BaselineOutcome {
            method,
            threshold,
            scores,
            alarm_steps,
        });
    }
    Ok(out)
}

/// Euclidean distance over keyed (leaf-level) share maps: ids missing on
/// either side count as zero — exactly the naive treatment that makes leaf
/// churn look like change.
pub fn keyed_euclidean(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let mut sq = 0.0;
    for (key, va) in a {
        let vb = b.get(key).copied().unwrap_or(0.0);
        sq += (va - vb) * (va - vb);
    }
    for (key, vb) in b {
        if !a.contains_key(key) {
            sq += vb * vb;
        }
    }
    sq.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coda::pivot_basis;
    use crate::drift::energy;
    use crate::lineage::ModelHealth;
    use crate::monitor::{BarrierBlock, ImminenceBlock, TrendDirection, WarningBlock};
    use approx::assert_relative_eq;

    fn report(t: i64, alarm: bool, distance: Option<f64>, level: WarningLevel) -> DriftReport {
        DriftReport {
            t,
            shares: BTreeMap::new(),
            balances: vec![0.0, 0.0],
            health: ModelHealth {
                confidence: 1.0,
                other_share: 0.01,
                degraded: false,
            },
            gated: None,
            warning: WarningBlock {
                distance,
                mad_ratio: None,
                level,
                trend: TrendDirection::Flat,
                baseline_ready: true,
            },
            imminence: Some(ImminenceBlock {
                step: crate::boundary::StepToBoundary::InwardInfinite,
                steps_to_boundary: if alarm { Some(0.5) } else { None },
                alert: alarm,
            }),
            attribution: None,
            barrier: BarrierBlock {
                barrier_index: 3.3,
                log_barrier: Some(4.0),
            },
            margins: BTreeMap::new(),
            violations: Vec::new(),
            drift_magnitude: 0.0,
            other_top: Vec::new(),
            floored_groups: Vec::new(),
        }
    }

    #[test]
    fn detection_delay_with_lead_and_false_alarms() {
        let mut reports: Vec<DriftReport> = (0..60)
            .map(|t| report(t, false, Some(0.1), WarningLevel::None))
            .collect();
        // An alarm long before the event is a false alarm; one inside the
        // pre-window is the detection with a 3-step lead.
        reports[5] = report(5, true, Some(0.1), WarningLevel::None);
        reports[47] = report(47, true, Some(0.3), WarningLevel::None);
        let mut crossings = BTreeMap::new();
        crossings.insert("cap".to_string(), 50_i64);
        let stats = detection_delay(&reports, &crossings, &[], AlarmRule::Imminence, 15);
        assert_eq!(stats.events.len(), 1);
        assert_eq!(stats.events[0].alarm_t, Some(47));
        assert_eq!(stats.events[0].delay, Some(-3));
        assert!(!stats.events[0].missed);
        assert_eq!(stats.false_alarm_steps, 1);
        assert_relative_eq!(stats.median_lead.unwrap(), 3.0);
    }

    #[test]
    fn detection_delay_marks_missed_events() {
        let reports: Vec<DriftReport> = (0..30)
            .map(|t| report(t, false, Some(0.1), WarningLevel::None))
            .collect();
        let mut crossings = BTreeMap::new();
        crossings.insert("cap".to_string(), 20_i64);
        crossings.insert("degenerate".to_string(), 0_i64);
        let stats = detection_delay(
            &reports,
            &crossings,
            &["degenerate".to_string()],
            AlarmRule::Imminence,
            10,
        );
        assert_eq!(stats.events.len(), 1);
        assert!(stats.events[0].missed);
        assert!(stats.median_delay.is_none());
    }

    #[test]
    fn false_alarm_rate_counts_windows() {
        let quiet: Vec<DriftReport> = (0..10)
            .map(|t| report(t, false, Some(0.1), WarningLevel::None))
            .collect();
        let mut noisy = quiet.clone();
        noisy[3] = report(3, true, Some(0.4), WarningLevel::None);
        let stats = false_alarm_rate(&[quiet.clone(), noisy, quiet], AlarmRule::Imminence);
        assert_eq!(stats.windows, 3);
        assert_eq!(stats.windows_with_alarm, 1);
        assert_relative_eq!(stats.rate, 1.0 / 3.0);
    }

    #[test]
    fn warning_rule_uses_level() {
        let r = report(0, false, Some(0.5), WarningLevel::Warn);
        assert!(is_alarm(&r, AlarmRule::WarningLevel));
        assert!(!is_alarm(&r, AlarmRule::Imminence));
        let r = report(0, false, Some(0.5), WarningLevel::Watch);
        assert!(!is_alarm(&r, AlarmRule::WarningLevel));
    }

    #[test]
    fn fidelity_checks_dominant_balance() {
        let seg = TruthSegment {
            start: 10,
            len: 10,
            direction: vec![1.0, 0.0],
            beta: 0.05,
            sigma: 0.0,
            stationary: false,
        };
        let mut reports: Vec<DriftReport> = (0..21)
            .map(|t| report(t, false, Some(0.1), WarningLevel::None))
            .collect();
        reports[20].attribution = Some(crate::drift::Attribution {
            entries: vec![crate::drift::AttributionEntry {
                balance: "b0".into(),
                index: 0,
                value: 0.6,
            }],
            no_drift: false,
        });
        let stats = attribution_fidelity(&reports, std::slice::from_ref(&seg), 1);
        assert_eq!(stats.hits, 1);
        assert_relative_eq!(stats.fidelity, 1.0);

        // Wrong top balance: a miss.
        reports[20].attribution = Some(crate::drift::Attribution {
            entries: vec![crate::drift::AttributionEntry {
                balance: "b1".into(),
                index: 1,
                value: 0.6,
            }],
            no_drift: false,
        });
        let stats = attribution_fidelity(&reports, &[seg], 1);
        assert_eq!(stats.hits, 0);
    }

    #[test]
    fn shock_statistic_exceeds_on_real_shock() {
        // 100 zero-mean samples, then 10 with a strong common offset.
        let mut deltas: Vec<Vec<f64>> = (0..100)
            .map(|i| vec![if i % 2 == 0 { 0.01 } else { -0.01 }, 0.0])
            .collect();
        deltas.extend((0..10).map(|_| vec![0.2, 0.0]));
        let res = shock_statistic(&deltas, 0..100, 100..110, 10, 0.95).unwrap();
        assert!(res.exceeds);
        assert_relative_eq!(res.statistic, 0.2, epsilon = 1e-12);

        let res = shock_statistic(&deltas, 0..100, 0..10, 10, 0.95).unwrap();
        assert!(!res.exceeds);
        assert!(matches!(
            shock_statistic(&deltas, 0..100, 100..105, 10, 0.95),
            Err(EvalError::ShockTooShort { .. })
        ));
    }

    #[test]
    fn localization_high_for_axis_aligned_energy() {
        let deltas: Vec<Vec<f64>> = (0..50).map(|_| vec![0.1, 0.001, 0.001]).collect();
        let profile = energy(&deltas).unwrap();
        let res = energy_localization(&profile, 1, 100, 80.0, 9).unwrap();
        assert!(res.top_share_pct > 99.0);
        assert!(res.satisfied, "top share {} vs random {}", res.top_share_pct, res.random_share_pct);
        assert!(res.random_share_pct < res.top_share_pct);
    }

    #[test]
    fn localization_unimpressive_for_isotropic_energy() {
        // Rotation-invariant second moment: the random baseline matches the
        // nominal share and the concentration test fails.
        let deltas = vec![
            vec![0.1, 0.0, 0.0],
            vec![0.0, 0.1, 0.0],
            vec![0.0, 0.0, 0.1],
        ];
        let profile = energy(&deltas).unwrap();
        let res = energy_localization(&profile, 1, 50, 80.0, 9).unwrap();
        assert!(res.top_share_pct < 34.0);
        assert!(!res.satisfied);
    }

    #[test]
    fn calibration_threshold_is_quantile() {
        let scores: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let thr = calibrate_threshold(&scores, 0.05).unwrap();
        assert_relative_eq!(thr, 95.0);
        assert!(calibrate_threshold(&[], 0.05).is_err());
    }

    #[test]
    fn baselines_fit_calibrate_and_alarm() {
        // Stationary-ish calibration around (0.4, 0.35, 0.25).
        let calib: Vec<Vec<Vec<f64>>> = (0..20)
            .map(|w| {
                (0..25)
                    .map(|i| {
                        let wiggle = ((w * 25 + i) as f64 * 0.7).sin() * 0.004;
                        vec![0.4 + wiggle, 0.35 - wiggle, 0.25]
                    })
                    .collect()
            })
            .collect();
        let mut eval: Vec<Vec<f64>> = calib[0].clone();
        // A genuine recomposition at the end.
        eval.extend((0..12).map(|i| {
            let s = 0.02 * (i + 1) as f64;
            vec![0.4 + s, 0.35 - s, 0.25]
        }));
        let ids: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let basis = pivot_basis(3).unwrap();
        let outcomes = run_baselines(
            &[
                BaselineMethod::EuclideanShares,
                BaselineMethod::PerPartEwma,
                BaselineMethod::PairwiseLogRatioEwma,
                BaselineMethod::AitchisonDistance,
            ],
            &eval,
            &calib,
            0.2,
            0.05,
            Some((&basis, &ids)),
        )
        .unwrap();
        for outcome in &outcomes {
            assert!(
                !outcome.alarm_steps.is_empty(),
                "{:?} missed the recomposition",
                outcome.method
            );
            // No alarms during the stationary prefix.
            assert!(
                outcome.alarm_steps.iter().all(|&i| i >= 25),
                "{:?} alarmed during calibration-like data at {:?}",
                outcome.method,
                outcome.alarm_steps
            );
        }
    }

    #[test]
    fn keyed_euclidean_penalizes_renames() {
        let mut a = BTreeMap::new();
        a.insert("x".to_string(), 0.5);
        a.insert("y".to_string(), 0.5);
        let mut b = BTreeMap::new();
        b.insert("x-renamed".to_string(), 0.5);
        b.insert("y".to_string(), 0.5);
        // Identical mass, different key: the naive view sees a jump.
        assert_relative_eq!(keyed_euclidean(&a, &b), 0.5_f64 * 2.0_f64.sqrt());
        assert_relative_eq!(keyed_euclidean(&a, &a), 0.0);
    }

    #[test]
    fn early_warning_reports_trend_and_lead() {
        let mut reports: Vec<DriftReport> = (0..40)
            .map(|t| report(t, false, Some(0.01 * t as f64), WarningLevel::None))
            .collect();
        reports[36] = report(36, true, Some(0.36), WarningLevel::None);
        let res = early_warning(&reports, 38, AlarmRule::Imminence, 20, TrendMethod::MannKendall)
            .unwrap();
        assert!(res.trend.significant(0.05));
        assert_eq!(res.trend.direction, 1);
        assert_eq!(res.alarm_t, Some(36));
        assert_eq!(res.lead, Some(2));
    }
}
