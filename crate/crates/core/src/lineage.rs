//! Stable grouping of volatile leaf parts.
//!
//! Raw observations name parts by ids that churn over time: services are
//! renamed, split into finer parts, or merged. Monitoring directly on leaf
//! ids would register every such event as spurious drift. This module keeps a
//! [`LineageMap`] from leaf ids onto a small fixed set of
//! [`CanonicalGroups`]; churn events update the map so that the amalgamated
//! group-level composition is continuous across within-group churn.
//!
//! The last group is always `"other"`, the catch-all for parts the map does
//! not know. A large or growing `"other"` share means the grouping no longer
//! describes the system, and downstream consumers are told via
//! [`ModelHealth`].

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coda::{zero_replace, CodaError, Composition};

/// The reserved catch-all group id.
pub const OTHER_GROUP: &str = "other";

/// Bounds on the number of canonical groups.
pub const MIN_GROUPS: usize = 3;
pub const MAX_GROUPS: usize = 16;

#[derive(Debug, Error)]
pub enum LineageError {
    #[error("need between {MIN_GROUPS} and {MAX_GROUPS} groups, got {0}")]
    BadGroupCount(usize),
    #[error("the last group must be {OTHER_GROUP:?}, got {0:?}")]
    LastNotOther(String),
    #[error("duplicate group id {0:?}")]
    DuplicateGroup(String),
    #[error("unknown group {0:?}")]
    UnknownGroup(String),
    #[error("part {0:?} is not tracked by the lineage map")]
    UnknownPart(String),
    #[error("part id {0:?} is already tracked; churn events must introduce fresh ids")]
    IdInUse(String),
    #[error("cannot merge parts from different groups: {details}")]
    CrossGroupMerge { details: String },
    #[error("invalid lineage event: {0}")]
    InvalidEvent(String),
    #[error("group {0:?} is missing from the amalgamated composition")]
    MissingGroup(String),
    #[error(transparent)]
    Coda(#[from] CodaError),
}

/// The ordered, validated list of group ids the monitor reports on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct CanonicalGroups {
    groups: Vec<String>,
}

impl CanonicalGroups {
    /// Validates the group list: between 3 and 16 ids, all distinct, with
    /// `"other"` appearing exactly once, in last position.
    pub fn new(groups: Vec<String>) -> Result<Self, LineageError> {
        if !(MIN_GROUPS..=MAX_GROUPS).contains(&groups.len()) {
            return Err(LineageError::BadGroupCount(groups.len()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for g in &groups {
            if !seen.insert(g.clone()) {
                return Err(LineageError::DuplicateGroup(g.clone()));
            }
        }
        match groups.last() {
            Some(last) if last == OTHER_GROUP => {}
            Some(last) => return Err(LineageError::LastNotOther(last.clone())),
            None => return Err(LineageError::BadGroupCount(0)),
        }
        Ok(Self { groups })
    }

    pub fn ids(&self) -> &[String] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.groups.iter().any(|g| g == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.groups.iter().position(|g| g == id)
    }
}

impl TryFrom<Vec<String>> for CanonicalGroups {
    type Error = LineageError;
    fn try_from(groups: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(groups)
    }
}

impl From<CanonicalGroups> for Vec<String> {
    fn from(g: CanonicalGroups) -> Self {
        g.groups
    }
}

/// A churn event in the observation stream's part vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "args", rename_all = "snake_case")]
pub enum LineageEventKind {
    /// `part` continues under the id `new_id`, same group.
    Rename { part: String, new_id: String },
    /// `part` is replaced by two or more `children`, all in its group.
    Split { part: String, children: Vec<String> },
    /// Two or more `parts` of a single group continue as `new_id`.
    Merge { parts: Vec<String>, new_id: String },
    /// A fresh part appears; without an explicit group it lands in `other`.
    Add {
        part: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        group: Option<String>,
    },
    /// `part` stops being tracked.
    Remove { part: String },
}

/// A churn event with the timestep it takes effect at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEvent {
    pub at: i64,
    #[serde(flatten)]
    pub kind: LineageEventKind,
}

/// The evolving assignment of leaf part ids to canonical groups.
///
/// The `epoch` counter increments on every applied event, letting consumers
/// detect that membership changed since they last looked.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageMap {
    assignment: BTreeMap<String, String>,
    epoch: u64,
}

impl LineageMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// The group a part belongs to; unknown parts fall into `"other"`.
    pub fn group_of<'a>(&'a self, part: &str) -> &'a str {
        self.assignment
            .get(part)
            .map(String::as_str)
            .unwrap_or(OTHER_GROUP)
    }

    pub fn is_tracked(&self, part: &str) -> bool {
        self.assignment.contains_key(part)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Tracked part ids assigned to `group`, in id order.
    pub fn members_of(&self, group: &str) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, g)| g.as_str() == group)
            .map(|(p, _)| p.clone())
            .collect()
    }

    pub fn tracked(&self) -> impl Iterator<Item = (&str, &str)> {
        self.assignment
            .iter()
            .map(|(p, g)| (p.as_str(), g.as_str()))
    }

    /// Applies one churn event, enforcing group continuity:
    ///
    /// - renamed parts and split children inherit the old part's group;
    /// - merges are only legal within a single group;
    /// - new ids must be fresh (not currently tracked);
    /// - adds may name a canonical group, defaulting to `"other"`.
    ///
    /// On error the map is left unchanged.
    pub fn apply_event(
        &mut self,
        event: &LineageEventKind,
        groups: &CanonicalGroups,
    ) -> Result<(), LineageError> {
        match event {
            LineageEventKind::Rename { part, new_id } => {
                if !self.assignment.contains_key(part) {
                    return Err(LineageError::UnknownPart(part.clone()));
                }
                if new_id == part || self.assignment.contains_key(new_id) {
                    return Err(LineageError::IdInUse(new_id.clone()));
                }
                let group = self.assignment.remove(part).expect("checked above");
                self.assignment.insert(new_id.clone(), group);
            }
            LineageEventKind::Split { part, children } => {
                if children.len() < 2 {
                    return Err(LineageError::InvalidEvent(format!(
                        "split of {part:?} needs at least two children, got {}",
                        children.len()
                    )));
                }
                if !self.assignment.contains_key(part) {
                    return Err(LineageError::UnknownPart(part.clone()));
                }
                let mut fresh = std::collections::BTreeSet::new();
                for child in children {
                    if child != part && self.assignment.contains_key(child) {
                        return Err(LineageError::IdInUse(child.clone()));
                    }
                    if !fresh.insert(child.as_str()) {
                        return Err(LineageError::IdInUse(child.clone()));
                    }
                }
                let group = self.assignment.remove(part).expect("checked above");
                for child in children {
                    self.assignment.insert(child.clone(), group.clone());
                }
            }
            LineageEventKind::Merge { parts, new_id } => {
                if parts.len() < 2 {
                    return Err(LineageError::InvalidEvent(format!(
                        "merge into {new_id:?} needs at least two parts, got {}",
                        parts.len()
                    )));
                }
                let mut group: Option<&str> = None;
                for part in parts {
                    let Some(g) = self.assignment.get(part) else {
                        return Err(LineageError::UnknownPart(part.clone()));
                    };
                    match group {
                        None => group = Some(g),
                        Some(g0) if g0 == g => {}
                        Some(g0) => {
                            return Err(LineageError::CrossGroupMerge {
                                details: format!(
                                    "parts {parts:?} span groups {g0:?} and {g:?}"
                                ),
                            });
                        }
                    }
                }
                if !parts.contains(new_id) && self.assignment.contains_key(new_id) {
                    return Err(LineageError::IdInUse(new_id.clone()));
                }
                let group = group.expect("at least two parts").to_string();
                for part in parts {
                    self.assignment.remove(part);
                }
                self.assignment.insert(new_id.clone(), group);
            }
            LineageEventKind::Add { part, group } => {
                let target = match group {
                    Some(g) => {
                        if !groups.contains(g) {
                            return Err(LineageError::UnknownGroup(g.clone()));
                        }
                        g.clone()
                    }
                    None => OTHER_GROUP.to_string(),
                };
                match self.assignment.entry(part.clone()) {
                    Entry::Occupied(_) => return Err(LineageError::IdInUse(part.clone())),
                    Entry::Vacant(slot) => {
                        slot.insert(target);
                    }
                }
            }
            LineageEventKind::Remove { part } => {
                if self.assignment.remove(part).is_none() {
                    return Err(LineageError::UnknownPart(part.clone()));
                }
            }
        }
        self.epoch += 1;
        Ok(())
    }
}

/// The group-level composition produced by [`amalgamate`], with the list of
/// groups that received no mass and were floored to stay representable.
#[derive(Debug, Clone, PartialEq)]
pub struct Amalgamation {
    pub composition: Composition,
    pub floored: Vec<String>,
}

/// Sums leaf shares into the canonical groups (untracked leaves go to
/// `"other"`), floors empty groups at a small share, and closes the result.
///
/// `empty_floor` is the share given to a group with no mass; it is shrunk
/// automatically if it would not sit below the smallest occupied group's
/// share, so an empty group never aborts monitoring.
pub fn amalgamate(
    x: &Composition,
    map: &LineageMap,
    groups: &CanonicalGroups,
    empty_floor: f64,
) -> Result<Amalgamation, LineageError> {
    let mut sums: Vec<f64> = vec![0.0; groups.len()];
    for (part, value) in x.iter() {
        let group = map.group_of(part);
        let idx = groups
            .index_of(group)
            .ok_or_else(|| LineageError::UnknownGroup(group.to_string()))?;
        sums[idx] += value;
    }
    let floored: Vec<String> = groups
        .ids()
        .iter()
        .zip(&sums)
        .filter(|(_, s)| **s == 0.0)
        .map(|(g, _)| g.clone())
        .collect();
    let pairs: Vec<(String, f64)> = groups.ids().iter().cloned().zip(sums.iter().copied()).collect();
    let composition = if floored.is_empty() {
        Composition::closure(pairs)?
    } else {
        let total: f64 = sums.iter().sum();
        let min_pos_share = sums
            .iter()
            .filter(|s| **s > 0.0)
            .map(|s| s / total)
            .fold(f64::INFINITY, f64::min);
        let floor = empty_floor.min(min_pos_share * 0.5);
        if floor <= 0.0 {
            return Err(LineageError::Coda(CodaError::AllZero));
        }
        Composition::closure(zero_replace(&pairs, |_| floor)?)?
    };
    Ok(Amalgamation {
        composition,
        floored,
    })
}

/// Gate thresholds for [`model_health`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HealthThresholds {
    /// Minimum observation confidence for reports to carry alerts.
    pub c_min: f64,
    /// Maximum tolerated `"other"` share.
    pub m_max: f64,
}

impl Default for HealthThresholds {
    fn default() -> Self {
        Self {
            c_min: 0.8,
            m_max: 0.10,
        }
    }
}

/// Whether the grouped view of the system can currently be trusted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHealth {
    pub confidence: f64,
    pub other_share: f64,
    /// True when confidence is below `c_min` or the other share exceeds
    /// `m_max`; alerts are suppressed while degraded.
    pub degraded: bool,
}

/// Assesses trust in the amalgamated composition `x` (which must contain the
/// `"other"` group) given the observation confidence in `[0, 1]`.
pub fn model_health(
    x: &Composition,
    confidence: f64,
    thresholds: &HealthThresholds,
) -> Result<ModelHealth, LineageError> {
    let other_share = x
        .get(OTHER_GROUP)
        .ok_or_else(|| LineageError::MissingGroup(OTHER_GROUP.to_string()))?;
    let confidence = confidence.clamp(0.0, 1.0);
    Ok(ModelHealth {
        confidence,
        other_share,
        degraded: confidence < thresholds.c_min || other_share > thresholds.m_max,
    })
}

/// Trailing per-part share history used to flag parts of `"other"` that are
/// growing rather than merely present.
#[derive(Debug, Clone)]
pub struct OtherHistory {
    window: usize,
    growth_ratio: f64,
    shares: BTreeMap<String, VecDeque<f64>>,
}

impl OtherHistory {
    /// `window`: number of trailing samples averaged; `growth_ratio`: a share
    /// above `ratio x trailing mean` counts as growing (default 2x over 8).
    pub fn new(window: usize, growth_ratio: f64) -> Self {
        Self {
            window: window.max(1),
            growth_ratio,
            shares: BTreeMap::new(),
        }
    }

    /// Records the share a part held this step. Call after querying
    /// [`other_contributors`] so "growing" compares against strictly earlier
    /// steps.
    pub fn record(&mut self, part: &str, share: f64) {
        let entry = self.shares.entry(part.to_string()).or_default();
        entry.push_back(share);
        while entry.len() > self.window {
            entry.pop_front();
        }
    }

    fn trailing_mean(&self, part: &str) -> f64 {
        match self.shares.get(part) {
            Some(h) if !h.is_empty() => h.iter().sum::<f64>() / h.len() as f64,
            _ => 0.0,
        }
    }

    fn is_growing(&self, part: &str, share: f64) -> bool {
        share > self.growth_ratio * self.trailing_mean(part)
    }
}

impl Default for OtherHistory {
    fn default() -> Self {
        Self::new(8, 2.0)
    }
}

/// One leaf currently mapped to `"other"`, with its share of the total and
/// whether that share is growing against its own trailing history. Parts with
/// no history (newcomers) count as growing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtherContributor {
    pub part: String,
    pub share: f64,
    pub growing: bool,
}

/// The top `k` leaves of the raw observation `x` that map to `"other"`,
/// ordered by share (ties broken by id) — the triage list for why the
/// catch-all is large.
pub fn other_contributors(
    x: &Composition,
    map: &LineageMap,
    k: usize,
    history: &OtherHistory,
) -> Vec<OtherContributor> {
    let mut entries: Vec<(String, f64)> = x
        .iter()
        .filter(|(part, _)| map.group_of(part) == OTHER_GROUP)
        .map(|(part, share)| (part.to_string(), share))
        .collect();
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    entries
        .into_iter()
        .take(k)
        .map(|(part, share)| {
            let growing = history.is_growing(&part, share);
            OtherContributor {
                part,
                share,
                growing,
            }
        })
        .collect()
}
