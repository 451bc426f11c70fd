//! Seeded synthetic traces with ground-truth labels.
//!
//! A scenario describes piecewise drift in balance coordinates: within each
//! segment the state takes steps `z_{t+1} = z_t + beta * u + sigma * eps`
//! with standard Gaussian `eps`, which on the simplex is a perturbation by a
//! powered direction composition. Group shares are read off through the
//! inverse ilr map, then spread over leaf parts by per-group templates so
//! the observation stream looks like real leaf-level telemetry.
//!
//! Churn (splits, merges, renames of leaf ids) is injected as a pure
//! transformation of the observation stream plus matching lineage events —
//! group-level mass is conserved exactly, which is what makes churned traces
//! a fair robustness test: a correct monitor must produce the same
//! group-level story with or without the churn.
//!
//! The emitted [`Truth`] carries the clean and noisy coordinate paths,
//! segment labels, and first boundary-crossing times so evaluation never has
//! to re-derive what the generator already knows.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::{BoundaryError, CompiledSafeSet, SafeSet};
use crate::coda::{ilr_inv, BalanceVector, CodaError, ContrastBasis, VALUE_FLOOR};
use crate::lineage::{CanonicalGroups, LineageError, LineageEvent, LineageEventKind};
use crate::monitor::Observation;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    BadSpec(String),
    #[error("churn event at t={at} conflicts with the trace: {detail}")]
    ChurnConflict { at: i64, detail: String },
    #[error(transparent)]
    Lineage(#[from] LineageError),
    #[error(transparent)]
    Coda(#[from] CodaError),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
}

/// One stretch of constant drift in balance coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Number of transitions in this segment.
    pub len: usize,
    /// Drift direction in balance coordinates; normalized internally. An
    /// all-zero direction (or `beta == 0`) makes the segment stationary.
    pub direction: Vec<f64>,
    /// Step size along the (unit) direction per transition.
    pub beta: f64,
    /// Standard deviation of the isotropic Gaussian step noise.
    pub sigma: f64,
}

impl Segment {
    pub fn stationary(len: usize, sigma: f64) -> Self {
        Self {
            len,
            direction: Vec::new(),
            beta: 0.0,
            sigma,
        }
    }

    pub fn drifting(len: usize, direction: Vec<f64>, beta: f64, sigma: f64) -> Self {
        Self {
            len,
            direction,
            beta,
            sigma,
        }
    }

    fn is_stationary(&self, dim: usize) -> bool {
        self.beta == 0.0 || self.unit_direction(dim).iter().all(|c| *c == 0.0)
    }

    fn unit_direction(&self, dim: usize) -> Vec<f64> {
        if self.direction.is_empty() {
            return vec![0.0; dim];
        }
        let norm = self.direction.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 {
            return vec![0.0; dim];
        }
        self.direction.iter().map(|c| c / norm).collect()
    }
}

/// How one group's share is spread over leaf parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafTemplate {
    pub group: String,
    /// Leaf part ids and their within-group fractions (normalized
    /// internally).
    pub parts: Vec<(String, f64)>,
    /// Optional per-part log-rates: within-group fractions evolve as
    /// `closure(f_i * exp(rate_i * t))`, re-mixing the group internally
    /// without moving group-level mass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<Vec<f64>>,
}

/// Leaf-vocabulary churn to inject into a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "args", rename_all = "snake_case")]
pub enum ChurnKind {
    /// Replace `part` by children with the given within-part fractions
    /// (must sum to 1).
    Split {
        part: String,
        children: Vec<(String, f64)>,
    },
    /// Sum `parts` into `new_id`.
    Merge { parts: Vec<String>, new_id: String },
    /// Re-key `part` as `new_id`.
    Rename { part: String, new_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnSpec {
    pub at: i64,
    #[serde(flatten)]
    pub kind: ChurnKind,
}

/// A full scenario description.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub groups: CanonicalGroups,
    pub basis: ContrastBasis,
    /// Starting point in balance coordinates.
    pub z0: Vec<f64>,
    pub segments: Vec<Segment>,
    /// Per-group leaf layouts; groups without a template get a single leaf
    /// named `<group>-p0`.
    pub leaves: Vec<LeafTemplate>,
    pub churn: Vec<ChurnSpec>,
    pub safe_set: SafeSet,
    pub seed: u64,
    /// Confidence stamped on every observation.
    pub confidence: f64,
}

impl ScenarioSpec {
    pub fn new(
        groups: CanonicalGroups,
        basis: ContrastBasis,
        z0: Vec<f64>,
        segments: Vec<Segment>,
        seed: u64,
    ) -> Self {
        Self {
            groups,
            basis,
            z0,
            segments,
            leaves: Vec::new(),
            churn: Vec::new(),
            safe_set: SafeSet::empty(),
            seed,
            confidence: 1.0,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let dim = self.groups.len() - 1;
        if self.basis.parts() != self.groups.len() {
            return Err(SynthError::BadSpec(format!(
                "basis covers {} parts but there are {} groups",
                self.basis.parts(),
                self.groups.len()
            )));
        }
        if self.z0.len() != dim {
            return Err(SynthError::BadSpec(format!(
                "starting point has {} coordinates, expected {dim}",
                self.z0.len()
            )));
        }
        if self.z0.iter().any(|c| !c.is_finite()) {
            return Err(SynthError::BadSpec("starting point is not finite".into()));
        }
        if self.segments.is_empty() || self.segments.iter().all(|s| s.len == 0) {
            return Err(SynthError::BadSpec("no transitions to generate".into()));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if !seg.direction.is_empty() && seg.direction.len() != dim {
                return Err(SynthError::BadSpec(format!(
                    "segment {i} direction has {} coordinates, expected {dim}",
                    seg.direction.len()
                )));
            }
            if seg.direction.iter().any(|c| !c.is_finite())
                || !seg.beta.is_finite()
                || !seg.sigma.is_finite()
                || seg.beta < 0.0
                || seg.sigma < 0.0
            {
                return Err(SynthError::BadSpec(format!(
                    "segment {i} has invalid drift parameters"
                )));
            }
        }
        let mut seen_groups = BTreeSet::new();
        let mut seen_parts = BTreeSet::new();
        for tpl in &self.leaves {
            if !self.groups.contains(&tpl.group) {
                return Err(SynthError::BadSpec(format!(
                    "leaf template names unknown group {:?}",
                    tpl.group
                )));
            }
            if !seen_groups.insert(tpl.group.clone()) {
                return Err(SynthError::BadSpec(format!(
                    "group {:?} has more than one leaf template",
                    tpl.group
                )));
            }
            if tpl.parts.is_empty() {
                return Err(SynthError::BadSpec(format!(
                    "leaf template for {:?} has no parts",
                    tpl.group
                )));
            }
            for (id, frac) in &tpl.parts {
                if !seen_parts.insert(id.clone()) {
                    return Err(SynthError::BadSpec(format!(
                        "leaf id {id:?} appears in more than one template"
                    )));
                }
                if !frac.is_finite() || *frac <= 0.0 {
                    return Err(SynthError::BadSpec(format!(
                        "leaf {id:?} has non-positive fraction {frac}"
                    )));
                }
            }
            if let Some(rates) = &tpl.drift {
                if rates.len() != tpl.parts.len() {
                    return Err(SynthError::BadSpec(format!(
                        "leaf template for {:?} has {} drift rates for {} parts",
                        tpl.group,
                        rates.len(),
                        tpl.parts.len()
                    )));
                }
                if rates.iter().any(|r| !r.is_finite()) {
                    return Err(SynthError::BadSpec(format!(
                        "leaf template for {:?} has non-finite drift rates",
                        tpl.group
                    )));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(SynthError::BadSpec(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// One segment as labeled in the truth document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSegment {
    /// Timestep of the first observation whose outgoing transition belongs
    /// to this segment.
    pub start: i64,
    /// Number of transitions.
    pub len: usize,
    /// Unit drift direction (all zeros when stationary).
    pub direction: Vec<f64>,
    pub beta: f64,
    pub sigma: f64,
    pub stationary: bool,
}

/// Everything the generator knows about the trace it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub seed: u64,
    pub groups: Vec<String>,
    /// Partition and names to rebuild the generating basis.
    pub basis_sbp: Vec<Vec<i8>>,
    pub basis_names: Vec<String>,
    pub segments: Vec<TruthSegment>,
    /// First timestep at which each constraint's margin reaches zero on the
    /// noise-free path (absent: never crossed).
    pub crossings: BTreeMap<String, i64>,
    /// Same, on the realized noisy path.
    pub noisy_crossings: BTreeMap<String, i64>,
    /// Constraints already violated at t=0.
    pub degenerate: Vec<String>,
    /// Balance coordinates of the noise-free path, one row per timestep.
    pub noiseless_z: Vec<Vec<f64>>,
    /// Balance coordinates of the realized path.
    pub noisy_z: Vec<Vec<f64>>,
}

/// A generated trace: the observation stream, its lineage events, and the
/// ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrace {
    pub observations: Vec<Observation>,
    pub lineage: Vec<LineageEvent>,
    pub truth: Truth,
}

/// Generates the scenario's observation stream (churn included) plus truth.
pub fn generate(spec: &ScenarioSpec) -> Result<LabeledTrace, SynthError> {
    spec.validate()?;
    let dim = spec.groups.len() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Coordinate paths: the noisy walk is the realized state; the clean path
    // integrates only the deterministic drift.
    let mut noisy = vec![spec.z0.clone()];
    let mut clean = vec![spec.z0.clone()];
    let mut segments = Vec::with_capacity(spec.segments.len());
    let mut t = 0i64;
    for seg in &spec.segments {
        let u = seg.unit_direction(dim);
        segments.push(TruthSegment {
            start: t,
            len: seg.len,
            direction: u.clone(),
            beta: seg.beta,
            sigma: seg.sigma,
            stationary: seg.is_stationary(dim),
        });
        for _ in 0..seg.len {
            let prev_n = noisy.last().expect("non-empty").clone();
            let prev_c = clean.last().expect("non-empty").clone();
            let mut next_n = Vec::with_capacity(dim);
            let mut next_c = Vec::with_capacity(dim);
            for j in 0..dim {
                let eps: f64 = StandardNormal.sample(&mut rng);
                next_n.push(prev_n[j] + seg.beta * u[j] + seg.sigma * eps);
                next_c.push(prev_c[j] + seg.beta * u[j]);
            }
            noisy.push(next_n);
            clean.push(next_c);
            t += 1;
        }
    }

    // Leaf layout: explicit templates, single default leaf otherwise.
    let mut templates: Vec<LeafTemplate> = Vec::with_capacity(spec.groups.len());
    for group in spec.groups.ids() {
        match spec.leaves.iter().find(|tpl| &tpl.group == group) {
            Some(tpl) => {
                let total: f64 = tpl.parts.iter().map(|(_, f)| f).sum();
                templates.push(LeafTemplate {
                    group: group.clone(),
                    parts: tpl
                        .parts
                        .iter()
                        .map(|(id, f)| (id.clone(), f / total))
                        .collect(),
                    drift: tpl.drift.clone(),
                });
            }
            None => templates.push(LeafTemplate {
                group: group.clone(),
                parts: vec![(format!("{group}-p0"), 1.0)],
                drift: None,
            }),
        }
    }

    let group_ids: Vec<String> = spec.groups.ids().to_vec();
    let mut observations = Vec::with_capacity(noisy.len());
    for (step, z) in noisy.iter().enumerate() {
        let zb = BalanceVector::new(z.clone(), &spec.basis);
        let shares = ilr_inv(&zb, &spec.basis, &group_ids)?;
        let mut parts = BTreeMap::new();
        for tpl in &templates {
            let group_share = shares.get(&tpl.group).expect("group present");
            let fractions = template_fractions(tpl, step as f64);
            for ((id, _), frac) in tpl.parts.iter().zip(&fractions) {
                parts.insert(id.clone(), group_share * frac);
            }
        }
        observations.push(Observation {
            t: step as i64,
            parts,
            confidence: spec.confidence,
            freeze: false,
        });
    }

    let mut lineage: Vec<LineageEvent> = templates
        .iter()
        .flat_map(|tpl| {
            let group = tpl.group.clone();
            tpl.parts.iter().map(move |(id, _)| LineageEvent {
                at: 0,
                kind: LineageEventKind::Add {
                    part: id.clone(),
                    group: Some(group.clone()),
                },
            })
        })
        .collect();

    apply_churn(&mut observations, &mut lineage, &spec.churn)?;

    let compiled = spec.safe_set.compile(&group_ids)?;
    let (crossings, degenerate) = label_crossings(&clean, &compiled, &spec.basis);
    let (noisy_crossings, _) = label_crossings(&noisy, &compiled, &spec.basis);

    Ok(LabeledTrace {
        observations,
        lineage,
        truth: Truth {
            seed: spec.seed,
            groups: group_ids,
            basis_sbp: spec.basis.sbp().to_vec(),
            basis_names: spec.basis.names().to_vec(),
            segments,
            crossings,
            noisy_crossings,
            degenerate,
            noiseless_z: clean,
            noisy_z: noisy,
        },
    })
}

/// Within-group fractions of a template at continuous time `t`.
fn template_fractions(tpl: &LeafTemplate, t: f64) -> Vec<f64> {
    match &tpl.drift {
        None => tpl.parts.iter().map(|(_, f)| *f).collect(),
        Some(rates) => {
            let raw: Vec<f64> = tpl
                .parts
                .iter()
                .zip(rates)
                .map(|((_, f), r)| f * (r * t).exp())
                .collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|v| v / total).collect()
        }
    }
}

/// Rewrites an existing trace's observations (from each event's timestep
/// forward) and appends the matching lineage events. Mass is conserved
/// exactly: split children sum to the parent, merges sum their parents.
pub fn inject_churn(
    mut trace: LabeledTrace,
    events: &[ChurnSpec],
) -> Result<LabeledTrace, SynthError> {
    apply_churn(&mut trace.observations, &mut trace.lineage, events)?;
    Ok(trace)
}

fn apply_churn(
    observations: &mut [Observation],
    lineage: &mut Vec<LineageEvent>,
    events: &[ChurnSpec],
) -> Result<(), SynthError> {
    if events.is_empty() {
        return Ok(());
    }
    let mut ordered: Vec<&ChurnSpec> = events.iter().collect();
    ordered.sort_by_key(|e| e.at);
    let horizon = observations.len() as i64;
    for event in ordered {
        if !(0..horizon).contains(&event.at) {
            return Err(SynthError::ChurnConflict {
                at: event.at,
                detail: format!("timestep outside the trace (0..{horizon})"),
            });
        }
        let start = event.at as usize;
        match &event.kind {
            ChurnKind::Split { part, children } => {
                if children.len() < 2 {
                    return Err(SynthError::ChurnConflict {
                        at: event.at,
                        detail: format!("split of {part:?} needs at least two children"),
                    });
                }
                let frac_sum: f64 = children.iter().map(|(_, f)| f).sum();
                if (frac_sum - 1.0).abs() > 1e-12
                    || children.iter().any(|(_, f)| !f.is_finite() || *f <= 0.0)
                {
                    return Err(SynthError::ChurnConflict {
                        at: event.at,
                        detail: format!(
                            "split fractions for {part:?} must be positive and sum to 1, \
                             got sum {frac_sum}"
                        ),
                    });
                }
                let mut ids = BTreeSet::new();
                for (child, _) in children {
                    if observations[start].parts.contains_key(child) || !ids.insert(child.clone())
                    {
                        return Err(SynthError::ChurnConflict {
                            at: event.at,
                            detail: format!("child id {child:?} is not fresh"),
                        });
                    }
                }
                for obs in observations[start..].iter_mut() {
                    let Some(value) = obs.parts.remove(part) else {
                        return Err(SynthError::ChurnConflict {
                            at: event.at,
                            detail: format!("part {part:?} absent at t={}", obs.t),
                        });
                    };
                    // Assign the last child the exact residual so the
                    // children always sum to the parent bit-for-bit.
                    let mut assigned = 0.0;
                    for (child, frac) in &children[..children.len() - 1] {
                        let v = value * frac;
                        assigned += v;
                        obs.parts.insert(child.clone(), v);
                    }
                    let (last, _) = &children[children.len() - 1];
                    obs.parts.insert(last.clone(), value - assigned);
                }
                lineage.push(LineageEvent {
                    at: event.at,
                    kind: LineageEventKind::Split {
                        part: part.clone(),
                        children: children.iter().map(|(id, _)| id.clone()).collect(),
                    },
                });
            }
            ChurnKind::Merge { parts, new_id } => {
                if parts.len() < 2 {
                    return Err(SynthError::ChurnConflict {
                        at: event.at,
                        detail: format!("merge into {new_id:?} needs at least two parts"),
                    });
                }
                if observations[start].parts.contains_key(new_id) && !parts.contains(new_id) {
                    return Err(SynthError::ChurnConflict {
                        at: event.at,
                        detail: format!("merged id {new_id:?} is not fresh"),
                    });
                }
                for obs in observations[start..].iter_mut() {
                    let mut total = 0.0;
                    for part in parts {
                        let Some(value) = obs.parts.remove(part) else {
                            return Err(SynthError::ChurnConflict {
                                at: event.at,
                                detail: format!("part {part:?} absent at t={}", obs.t),
                            });
                        };
                        total += value;
                    }
                    obs.parts.insert(new_id.clone(), total);
                }
                lineage.push(LineageEvent {
                    at: event.at,
                    kind: LineageEventKind::Merge {
                        parts: parts.clone(),
                        new_id: new_id.clone(),
                    },
                });
            }
            ChurnKind::Rename { part, new_id } => {
                if observations[start].parts.contains_key(new_id) {
                    return Err(SynthError::ChurnConflict {
                        at: event.at,
                        detail: format!("renamed id {new_id:?} is not fresh"),
                    });
                }
                for obs in observations[start..].iter_mut() {
                    let Some(value) = obs.parts.remove(part) else {
                        return Err(SynthError::ChurnConflict {
                            at: event.at,
                            detail: format!("part {part:?} absent at t={}", obs.t),
                        });
                    };
                    obs.parts.insert(new_id.clone(), value);
                }
                lineage.push(LineageEvent {
                    at: event.at,
                    kind: LineageEventKind::Rename {
                        part: part.clone(),
                        new_id: new_id.clone(),
                    },
                });
            }
        }
    }
    lineage.sort_by_key(|e| e.at);
    Ok(())
}

/// First timestep each constraint's margin reaches zero along a coordinate
/// path, plus the constraints already violated at t=0.
pub fn label_crossings(
    path: &[Vec<f64>],
    omega: &CompiledSafeSet,
    basis: &ContrastBasis,
) -> (BTreeMap<String, i64>, Vec<String>) {
    let mut crossings = BTreeMap::new();
    let mut degenerate = Vec::new();
    for c in &omega.constraints {
        // Margin through clr coordinates: h(z) = a . (V^T z) - b, evaluated
        // directly since the contrast rows already encode V.
        let margin = |z: &[f64]| -> f64 {
            let mut clr = vec![0.0; basis.parts()];
            for (row, &coord) in basis.contrast().iter().zip(z) {
                for (acc, w) in clr.iter_mut().zip(row) {
                    *acc += coord * w;
                }
            }
            c.coeffs.iter().zip(&clr).map(|(a, l)| a * l).sum::<f64>() - c.threshold
        };
        for (t, z) in path.iter().enumerate() {
            if margin(z) >= 0.0 {
                crossings.insert(c.name.clone(), t as i64);
                if t == 0 {
                    degenerate.push(c.name.clone());
                }
                break;
            }
        }
    }
    (crossings, degenerate)
}

/// Group shares along a coordinate path — the view the naive baseline
/// detectors operate on.
pub fn shares_along(
    path: &[Vec<f64>],
    basis: &ContrastBasis,
    groups: &[String],
) -> Result<Vec<Vec<f64>>, SynthError> {
    let mut out = Vec::with_capacity(path.len());
    for z in path {
        let zb = BalanceVector::new(z.clone(), basis);
        let x = ilr_inv(&zb, basis, groups)?;
        out.push(x.values().to_vec());
    }
    Ok(out)
}

/// Log shares of one part along a path (used by ratio-style baselines).
pub fn log_share(value: f64) -> f64 {
    value.max(VALUE_FLOOR).ln()
}
