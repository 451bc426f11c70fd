//! The per-step control loop: observations in, drift reports out.
//!
//! Each step normalizes a raw leaf observation (zero handling, closure),
//! folds churn events into the lineage map, amalgamates to the canonical
//! groups, and updates the drift estimate, reference point, and boundary
//! diagnostics. The result is a [`DriftReport`] carrying the warning level,
//! imminence information, attributions, and the model-health verdict that
//! gates all of it.
//!
//! Alerts never fire while the model is degraded (low observation confidence
//! or an oversized `"other"` share): a monitor that cannot see the system
//! clearly reports that fact instead of guessing.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::{
    log_barrier, step_to_boundary, BoundaryError, CompiledSafeSet, LogBarrier, ReferenceParams,
    ReferenceState, SafeSet, StepToBoundary,
};
use crate::coda::{
    ilr, pivot_basis, zero_replace, BalanceVector, CodaError, Composition, ContrastBasis,
};
use crate::drift::{attribute, delta_z, Attribution, DriftError, DriftEstimate, DriftParams};
use crate::lineage::{
    amalgamate, model_health, other_contributors, CanonicalGroups, HealthThresholds, LineageError,
    LineageEventKind, LineageMap, ModelHealth, OtherContributor, OtherHistory, OTHER_GROUP,
};
use crate::stats::{mad, mann_kendall, median, TREND_MIN_LEN};

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("invalid monitor configuration: {0}")]
    BadConfig(String),
    #[error("observation at t={t} is invalid: {reason}")]
    BadObservation { t: i64, reason: String },
    #[error("observation at t={got} arrived after t={last}; timesteps must strictly increase")]
    OutOfOrder { last: i64, got: i64 },
    #[error("group {0:?} is not a canonical group")]
    UnknownGroup(String),
    #[error("group {group:?} has {members} observed member(s); drill-down needs at least two")]
    DrillSingleton { group: String, members: usize },
    #[error(
        "group {group:?} saw churn at t={last_event} (within the stability window of {window} \
         steps); drill-down would mix pre- and post-churn coordinates"
    )]
    DrillUnstable {
        group: String,
        last_event: i64,
        window: u64,
    },
    #[error("drill-down basis covers {got} parts but group {group:?} has {expected}")]
    DrillBasisMismatch {
        group: String,
        expected: usize,
        got: usize,
    },
    #[error("no observations processed yet")]
    NoObservations,
    #[error(transparent)]
    Lineage(#[from] LineageError),
    #[error(transparent)]
    Coda(#[from] CodaError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
}

/// One raw observation of leaf-part mass at a timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: i64,
    /// Leaf part id -> non-negative mass (any consistent unit).
    pub parts: BTreeMap<String, f64>,
    /// Pipeline confidence in this observation, in `[0, 1]`.
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    /// Operator hold: freeze the reference while true.
    #[serde(default)]
    pub freeze: bool,
}

fn default_confidence() -> f64 {
    1.0
}

/// Severity ladder for the distance-to-reference signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningLevel {
    None,
    Watch,
    Warn,
    Critical,
}

/// Direction of the recent distance trend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendDirection {
    Rising,
    Flat,
    Falling,
}

/// Warning thresholds and baselines for the distance signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarningParams {
    /// Number of post-warm-up distance samples frozen as the noise baseline.
    pub baseline_window: usize,
    /// Deviation thresholds in baseline MADs.
    pub watch: f64,
    pub warn: f64,
    pub critical: f64,
    /// Recent distances fed to the monotone-trend test.
    pub trend_window: usize,
    pub trend_alpha: f64,
}

impl Default for WarningParams {
    fn default() -> Self {
        Self {
            baseline_window: 28,
            watch: 2.0,
            warn: 4.0,
            critical: 8.0,
            trend_window: 16,
            trend_alpha: 0.05,
        }
    }
}

/// Boundary reporting knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryParams {
    /// Crossings farther than this (in Aitchison units) report "beyond
    /// horizon" instead of a number.
    pub lambda_max: f64,
    /// Tolerance for the bisection cross-check.
    pub eps: f64,
    /// Alert when the boundary is at most this many smoothed steps away.
    pub alert_steps: f64,
}

impl Default for BoundaryParams {
    fn default() -> Self {
        Self {
            lambda_max: 10.0,
            eps: 1e-6,
            alert_steps: 1.0,
        }
    }
}

/// How zero leaf masses are replaced before taking logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroPolicy {
    /// Detection limit (as a share of the total) for parts not listed.
    pub default_detection_limit: f64,
    /// Per-part detection-limit overrides.
    pub per_part: BTreeMap<String, f64>,
    /// Multiplier applied to the detection limit to get the replacement
    /// share (the usual convention is 0.65 x limit).
    pub delta_factor: f64,
}

impl Default for ZeroPolicy {
    fn default() -> Self {
        Self {
            default_detection_limit: 1e-4,
            per_part: BTreeMap::new(),
            delta_factor: 0.65,
        }
    }
}

impl ZeroPolicy {
    pub fn delta_for(&self, part: &str) -> f64 {
        let limit = self
            .per_part
            .get(part)
            .copied()
            .unwrap_or(self.default_detection_limit);
        self.delta_factor * limit
    }
}

/// Full monitor configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorConfig {
    pub groups: CanonicalGroups,
    pub basis: ContrastBasis,
    pub safe_set: SafeSet,
    pub health: HealthThresholds,
    pub drift: DriftParams,
    pub reference: ReferenceParams,
    pub warning: WarningParams,
    pub boundary: BoundaryParams,
    pub zeros: ZeroPolicy,
    /// Balances reported per attribution.
    pub attribution_k: usize,
    /// Leaves listed when explaining the `"other"` share.
    pub other_top_k: usize,
    /// Trailing window and growth ratio for flagging growing `"other"`
    /// members.
    pub other_window: usize,
    pub other_growth_ratio: f64,
    /// Steps a group must be churn-free before drill-down is allowed.
    pub drill_stability_window: u64,
}

impl MonitorConfig {
    /// A configuration with default tuning for the given structure.
    pub fn new(groups: CanonicalGroups, basis: ContrastBasis, safe_set: SafeSet) -> Self {
        Self {
            groups,
            basis,
            safe_set,
            health: HealthThresholds::default(),
            drift: DriftParams::default(),
            reference: ReferenceParams::default(),
            warning: WarningParams::default(),
            boundary: BoundaryParams::default(),
            zeros: ZeroPolicy::default(),
            attribution_k: 3,
            other_top_k: 3,
            other_window: 8,
            other_growth_ratio: 2.0,
            drill_stability_window: 8,
        }
    }

    fn validate(&self) -> Result<(), MonitorError> {
        if self.basis.parts() != self.groups.len() {
            return Err(MonitorError::BadConfig(format!(
                "basis covers {} parts but there are {} groups",
                self.basis.parts(),
                self.groups.len()
            )));
        }
        if !(0.0 < self.health.c_min && self.health.c_min <= 1.0) {
            return Err(MonitorError::BadConfig(format!(
                "confidence gate must lie in (0, 1], got {}",
                self.health.c_min
            )));
        }
        if !(0.0 < self.health.m_max && self.health.m_max < 1.0) {
            return Err(MonitorError::BadConfig(format!(
                "other-share gate must lie in (0, 1), got {}",
                self.health.m_max
            )));
        }
        if !(0.0 < self.drift.lambda && self.drift.lambda <= 1.0) {
            return Err(MonitorError::BadConfig(format!(
                "smoothing weight must lie in (0, 1], got {}",
                self.drift.lambda
            )));
        }
        let w = &self.warning;
        if !(w.watch <= w.warn && w.warn <= w.critical) || w.watch < 0.0 {
            return Err(MonitorError::BadConfig(
                "warning thresholds must satisfy 0 <= watch <= warn <= critical".into(),
            ));
        }
        if self.attribution_k == 0 {
            return Err(MonitorError::BadConfig(
                "attribution must report at least one balance".into(),
            ));
        }
        if self.boundary.lambda_max <= 0.0 || self.boundary.eps <= 0.0 {
            return Err(MonitorError::BadConfig(
                "boundary horizon and tolerance must be positive".into(),
            ));
        }
        if self.zeros.default_detection_limit <= 0.0
            || self.zeros.delta_factor <= 0.0
            || self.zeros.per_part.values().any(|l| *l <= 0.0)
        {
            return Err(MonitorError::BadConfig(
                "detection limits and the replacement factor must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Distance-signal block of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarningBlock {
    /// Aitchison distance from the reference; absent until warm-up ends.
    pub distance: Option<f64>,
    /// Deviation above the baseline median, in baseline MADs.
    pub mad_ratio: Option<f64>,
    pub level: WarningLevel,
    pub trend: TrendDirection,
    /// True once the noise baseline is frozen and levels are meaningful.
    pub baseline_ready: bool,
}

/// Boundary-proximity block of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImminenceBlock {
    pub step: StepToBoundary,
    /// Crossing distance divided by the smoothed per-step magnitude.
    pub steps_to_boundary: Option<f64>,
    pub alert: bool,
}

/// A constraint currently at or past its boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationEntry {
    pub constraint: String,
    pub margin: f64,
}

/// Barrier diagnostics; `log_barrier` is `None` when the envelope is
/// violated (the barrier is unbounded there).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierBlock {
    pub barrier_index: f64,
    pub log_barrier: Option<f64>,
}

/// Everything the monitor can say about one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub t: i64,
    /// Amalgamated group shares.
    pub shares: BTreeMap<String, f64>,
    /// Balance coordinates of the amalgamated state.
    pub balances: Vec<f64>,
    pub health: ModelHealth,
    /// Set when alerts are suppressed, naming the reason(s).
    pub gated: Option<String>,
    pub warning: WarningBlock,
    /// Present when a drift direction exists and the state is inside the
    /// envelope.
    pub imminence: Option<ImminenceBlock>,
    /// Present once a reference exists.
    pub attribution: Option<Attribution>,
    pub barrier: BarrierBlock,
    pub margins: BTreeMap<String, f64>,
    pub violations: Vec<ViolationEntry>,
    /// Norm of the smoothed per-step displacement.
    pub drift_magnitude: f64,
    /// Largest leaves currently mapped to `"other"`.
    pub other_top: Vec<OtherContributor>,
    /// Groups that received no mass and were floored.
    pub floored_groups: Vec<String>,
}

/// Maps a deviation (in baseline MADs) to a warning level.
pub fn warning_level(mad_ratio: f64, params: &WarningParams) -> WarningLevel {
    if mad_ratio >= params.critical {
        WarningLevel::Critical
    } else if mad_ratio >= params.warn {
        WarningLevel::Warn
    } else if mad_ratio >= params.watch {
        WarningLevel::Watch
    } else {
        WarningLevel::None
    }
}

/// Per-group drill-down state: the same geometry run within one group's
/// observed members.
struct GroupDrill {
    members: Vec<String>,
    basis: ContrastBasis,
    reference: ReferenceState,
    last_z: Option<BalanceVector>,
    last_shares: BTreeMap<String, f64>,
}

/// Frozen noise statistics for the distance signal.
struct DistanceBaseline {
    collecting: Vec<f64>,
    frozen: Option<(f64, f64)>,
    window: usize,
}

impl DistanceBaseline {
    fn new(window: usize) -> Self {
        Self {
            collecting: Vec::with_capacity(window),
            frozen: None,
            window,
        }
    }

    fn push(&mut self, d: f64) {
        if self.frozen.is_some() {
            return;
        }
        self.collecting.push(d);
        if self.collecting.len() >= self.window {
            self.frozen = Some((median(&self.collecting), mad(&self.collecting)));
        }
    }
}

/// The monitor's full mutable state.
pub struct MonitorState {
    config: MonitorConfig,
    compiled: CompiledSafeSet,
    lineage: LineageMap,
    estimate: DriftEstimate,
    reference: ReferenceState,
    other_history: OtherHistory,
    baseline: DistanceBaseline,
    recent_distances: VecDeque<f64>,
    prev_z: Option<BalanceVector>,
    last_t: Option<i64>,
    drills: BTreeMap<String, GroupDrill>,
    group_churned_at: BTreeMap<String, i64>,
}

impl MonitorState {
    pub fn new(config: MonitorConfig) -> Result<Self, MonitorError> {
        config.validate()?;
        let compiled = config.safe_set.compile(config.groups.ids())?;
        let dim = config.basis.dim();
        Ok(Self {
            estimate: DriftEstimate::new(dim, config.drift),
            reference: ReferenceState::new(dim, &config.basis, config.reference),
            other_history: OtherHistory::new(config.other_window, config.other_growth_ratio),
            baseline: DistanceBaseline::new(config.warning.baseline_window),
            recent_distances: VecDeque::new(),
            prev_z: None,
            last_t: None,
            drills: BTreeMap::new(),
            group_churned_at: BTreeMap::new(),
            compiled,
            lineage: LineageMap::new(),
            config,
        })
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn lineage(&self) -> &LineageMap {
        &self.lineage
    }

    pub fn reference(&self) -> &ReferenceState {
        &self.reference
    }

    pub fn estimate(&self) -> &DriftEstimate {
        &self.estimate
    }

    /// Operator re-baseline: drop the reference and learn afresh from the
    /// current regime.
    pub fn rebaseline(&mut self) {
        self.reference.reset();
        self.baseline = DistanceBaseline::new(self.config.warning.baseline_window);
        self.recent_distances.clear();
    }

    /// Processes one observation together with the churn events taking
    /// effect at (or before) its timestep.
    pub fn step(
        &mut self,
        obs: &Observation,
        events: &[LineageEventKind],
    ) -> Result<DriftReport, MonitorError> {
        if let Some(last) = self.last_t {
            if obs.t <= last {
                return Err(MonitorError::OutOfOrder {
                    last,
                    got: obs.t,
                });
            }
        }
        if !(0.0..=1.0).contains(&obs.confidence) {
            return Err(MonitorError::BadObservation {
                t: obs.t,
                reason: format!("confidence {} outside [0, 1]", obs.confidence),
            });
        }
        if obs.parts.len() < 2 {
            return Err(MonitorError::BadObservation {
                t: obs.t,
                reason: format!("{} part(s); need at least two", obs.parts.len()),
            });
        }

        for event in events {
            self.note_churn(event, obs.t);
            self.lineage.apply_event(event, &self.config.groups)?;
        }

        // Normalize the raw observation: replace zeros, then close.
        let pairs: Vec<(String, f64)> = obs
            .parts
            .iter()
            .map(|(id, v)| (id.clone(), *v))
            .collect();
        let replaced = zero_replace(&pairs, |part| self.config.zeros.delta_for(part))
            .map_err(|e| match e {
                CodaError::AllZero => MonitorError::BadObservation {
                    t: obs.t,
                    reason: "all parts are zero".into(),
                },
                other => MonitorError::Coda(other),
            })?;
        let x_leaf = Composition::closure(replaced)?;

        let am = amalgamate(
            &x_leaf,
            &self.lineage,
            &self.config.groups,
            self.config.zeros.delta_for(OTHER_GROUP).min(1e-6),
        )?;
        let health = model_health(&am.composition, obs.confidence, &self.config.health)?;
        let z = ilr(&am.composition, &self.config.basis)?;

        if let Some(prev) = &self.prev_z {
            let dz = delta_z(prev, &z)?;
            self.estimate.update(&dz)?;
        }
        self.prev_z = Some(z.clone());

        self.reference.update(&z, obs.freeze, health.degraded)?;

        // Distance signal, baseline, level, trend.
        let distance = self.reference.distance_to(&z)?;
        let mut mad_ratio = None;
        let mut level = WarningLevel::None;
        if let Some(d) = distance {
            self.baseline.push(d);
            if let Some((med, noise_mad)) = self.baseline.frozen {
                let dev = (d - med).max(0.0);
                let ratio = dev / noise_mad.max(crate::drift::MAD_FLOOR);
                mad_ratio = Some(ratio);
                level = warning_level(ratio, &self.config.warning);
            }
            self.recent_distances.push_back(d);
            while self.recent_distances.len() > self.config.warning.trend_window {
                self.recent_distances.pop_front();
            }
        }
        let trend = if self.recent_distances.len() >= TREND_MIN_LEN {
            let series: Vec<f64> = self.recent_distances.iter().copied().collect();
            match mann_kendall(&series) {
                Ok(test) if test.significant(self.config.warning.trend_alpha) => {
                    if test.direction > 0 {
                        TrendDirection::Rising
                    } else {
                        TrendDirection::Falling
                    }
                }
                _ => TrendDirection::Flat,
            }
        } else {
            TrendDirection::Flat
        };

        // Boundary diagnostics.
        let margins_list = self.compiled.margins(&am.composition)?;
        let violations: Vec<ViolationEntry> = margins_list
            .iter()
            .filter(|(_, h)| *h >= 0.0)
            .map(|(name, h)| ViolationEntry {
                constraint: name.clone(),
                margin: *h,
            })
            .collect();
        let barrier = BarrierBlock {
            barrier_index: crate::boundary::barrier_index(&am.composition),
            log_barrier: match log_barrier(&am.composition, &self.compiled)? {
                LogBarrier::Finite { value } => Some(value),
                LogBarrier::Violated { .. } => None,
            },
        };

        let magnitude = self.estimate.magnitude();
        let imminence = if violations.is_empty() {
            match self.estimate.direction() {
                Some(direction) => {
                    let step = step_to_boundary(
                        &z,
                        &direction,
                        &self.compiled,
                        &self.config.basis,
                        self.config.boundary.lambda_max,
                        self.config.boundary.eps,
                    )?;
                    let steps_to_boundary = match &step {
                        StepToBoundary::Crossing { lambda, .. } => Some(lambda / magnitude),
                        _ => None,
                    };
                    let alert = !health.degraded
                        && steps_to_boundary
                            .is_some_and(|s| s <= self.config.boundary.alert_steps);
                    Some(ImminenceBlock {
                        step,
                        steps_to_boundary,
                        alert,
                    })
                }
                None => None,
            }
        } else {
            None
        };

        let attribution = match self.reference.reference() {
            Some(star) => {
                let diff: Vec<f64> = z
                    .coords
                    .iter()
                    .zip(&star.coords)
                    .map(|(c, s)| c - s)
                    .collect();
                Some(attribute(&diff, &self.config.basis, self.config.attribution_k)?)
            }
            None => None,
        };

        // Explain the catch-all, then record this step's shares for next time.
        let other_top = other_contributors(
            &x_leaf,
            &self.lineage,
            self.config.other_top_k,
            &self.other_history,
        );
        for (part, share) in x_leaf.iter() {
            if self.lineage.group_of(part) == OTHER_GROUP {
                self.other_history.record(part, share);
            }
        }

        let mut gate_reasons = Vec::new();
        if health.confidence < self.config.health.c_min {
            gate_reasons.push("low-confidence");
        }
        if health.other_share > self.config.health.m_max {
            gate_reasons.push("high-other-share");
        }
        let gated = if gate_reasons.is_empty() {
            None
        } else {
            Some(gate_reasons.join(","))
        };
        if health.degraded {
            level = level.min(WarningLevel::Watch);
        }

        self.update_drills(&x_leaf, obs.freeze, health.degraded)?;
        self.last_t = Some(obs.t);

        Ok(DriftReport {
            t: obs.t,
            shares: am
                .composition
                .iter()
                .map(|(g, v)| (g.to_string(), v))
                .collect(),
            balances: z.coords.clone(),
            health,
            gated,
            warning: WarningBlock {
                distance,
                mad_ratio,
                level,
                trend,
                baseline_ready: self.baseline.frozen.is_some(),
            },
            imminence,
            attribution,
            barrier,
            margins: margins_list.into_iter().collect(),
            violations,
            drift_magnitude: magnitude,
            other_top,
            floored_groups: am.floored,
        })
    }

    fn note_churn(&mut self, event: &LineageEventKind, t: i64) {
        let group = match event {
            LineageEventKind::Rename { part, .. }
            | LineageEventKind::Split { part, .. }
            | LineageEventKind::Remove { part } => self.lineage.group_of(part).to_string(),
            LineageEventKind::Merge { parts, .. } => parts
                .first()
                .map(|p| self.lineage.group_of(p).to_string())
                .unwrap_or_else(|| OTHER_GROUP.to_string()),
            LineageEventKind::Add { group, .. } => group
                .clone()
                .unwrap_or_else(|| OTHER_GROUP.to_string()),
        };
        self.group_churned_at.insert(group, t);
    }

    /// Keeps per-group member geometry current; membership changes reset the
    /// group's reference so pre- and post-churn coordinates are never mixed.
    fn update_drills(
        &mut self,
        x_leaf: &Composition,
        freeze: bool,
        degraded: bool,
    ) -> Result<(), MonitorError> {
        for group in self.config.groups.ids() {
            let members: Vec<String> = self
                .lineage
                .members_of(group)
                .into_iter()
                .filter(|m| x_leaf.get(m).is_some())
                .collect();
            if members.len() < 2 {
                self.drills.remove(group);
                continue;
            }
            let needs_reset = match self.drills.get(group) {
                Some(d) => d.members != members,
                None => true,
            };
            if needs_reset {
                let basis = pivot_basis(members.len())?;
                let reference =
                    ReferenceState::new(members.len() - 1, &basis, self.config.reference);
                self.drills.insert(
                    group.clone(),
                    GroupDrill {
                        members: members.clone(),
                        basis,
                        reference,
                        last_z: None,
                        last_shares: BTreeMap::new(),
                    },
                );
            }
            let drill = self.drills.get_mut(group).expect("inserted above");
            let sub = Composition::closure(
                members
                    .iter()
                    .map(|m| (m.clone(), x_leaf.get(m).expect("filtered to present"))),
            )?;
            let z = ilr(&sub, &drill.basis)?;
            drill.reference.update(&z, freeze, degraded)?;
            drill.last_shares = sub.iter().map(|(p, v)| (p.to_string(), v)).collect();
            drill.last_z = Some(z);
        }
        Ok(())
    }

    /// The same drift geometry run within one group's observed members.
    ///
    /// Refused while the group has fewer than two observed members or saw
    /// churn within the configured stability window. A caller-supplied basis
    /// over the group's members re-expresses the coordinates; by default the
    /// group's pivot basis is used.
    pub fn drilldown(
        &self,
        group: &str,
        basis: Option<&ContrastBasis>,
    ) -> Result<DrilldownReport, MonitorError> {
        let last_t = self.last_t.ok_or(MonitorError::NoObservations)?;
        if !self.config.groups.contains(group) {
            return Err(MonitorError::UnknownGroup(group.to_string()));
        }
        if let Some(&event_t) = self.group_churned_at.get(group) {
            let window = self.config.drill_stability_window;
            if ((last_t - event_t).max(0) as u64) < window {
                return Err(MonitorError::DrillUnstable {
                    group: group.to_string(),
                    last_event: event_t,
                    window,
                });
            }
        }
        let drill = self.drills.get(group).ok_or_else(|| MonitorError::DrillSingleton {
            group: group.to_string(),
            members: self
                .lineage
                .members_of(group)
                .len(),
        })?;
        let z = drill.last_z.as_ref().ok_or(MonitorError::NoObservations)?;

        let (z_out, star_out, basis_out) = match basis {
            Some(b) => {
                if b.parts() != drill.members.len() {
                    return Err(MonitorError::DrillBasisMismatch {
                        group: group.to_string(),
                        expected: drill.members.len(),
                        got: b.parts(),
                    });
                }
                let z2 = crate::coda::change_basis(z, &drill.basis, b)?;
                let star2 = match drill.reference.reference() {
                    Some(star) => Some(crate::coda::change_basis(&star, &drill.basis, b)?),
                    None => None,
                };
                (z2, star2, b.clone())
            }
            None => (z.clone(), drill.reference.reference(), drill.basis.clone()),
        };

        let distance = star_out.as_ref().map(|star| {
            star.coords
                .iter()
                .zip(&z_out.coords)
                .map(|(s, c)| (s - c) * (s - c))
                .sum::<f64>()
                .sqrt()
        });
        let attribution = match &star_out {
            Some(star) => {
                let diff: Vec<f64> = z_out
                    .coords
                    .iter()
                    .zip(&star.coords)
                    .map(|(c, s)| c - s)
                    .collect();
                Some(attribute(
                    &diff,
                    &basis_out,
                    self.config.attribution_k.min(basis_out.dim()),
                )?)
            }
            None => None,
        };
        Ok(DrilldownReport {
            group: group.to_string(),
            members: drill.members.clone(),
            shares: drill.last_shares.clone(),
            balances: z_out.coords,
            balance_names: basis_out.names().to_vec(),
            distance,
            attribution,
        })
    }
}

/// Within-group geometry for one canonical group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrilldownReport {
    pub group: String,
    pub members: Vec<String>,
    /// Member shares renormalized within the group.
    pub shares: BTreeMap<String, f64>,
    pub balances: Vec<f64>,
    pub balance_names: Vec<String>,
    /// Distance from the group's own reference; absent until its warm-up
    /// ends.
    pub distance: Option<f64>,
    pub attribution: Option<Attribution>,
}
