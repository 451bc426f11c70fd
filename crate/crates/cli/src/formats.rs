//! File formats: deterministic JSON emission at a fixed decimal precision,
//! line-delimited record I/O with line-numbered errors, and the document
//! types that bridge on-disk configuration to the library's structures.
//!
//! Every real number is written with 12 significant digits. That is enough
//! headroom for the 1e-9 tolerances used in tests, stays stable across
//! platforms, and makes serialize→parse→serialize idempotent.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use driftwatch_core::boundary::{LogContrastConstraint, SafeSet};
use driftwatch_core::coda::{sbp_to_basis, ContrastBasis};
use driftwatch_core::lineage::CanonicalGroups;
use driftwatch_core::monitor::MonitorConfig;
use driftwatch_core::synthgen::{ChurnSpec, LeafTemplate, ScenarioSpec, Segment};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Document { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl FormatError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// A real number at 12 significant digits, e.g. `2.69443871706e-1`.
pub fn float_repr(x: f64) -> String {
    format!("{x:.11e}")
}

fn write_json(out: &mut String, value: &Value, indent: Option<usize>) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => {
            let _ = write!(out, "{b}");
        }
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                let _ = write!(out, "{i}");
            } else if let Some(u) = n.as_u64() {
                let _ = write!(out, "{u}");
            } else {
                out.push_str(&float_repr(n.as_f64().unwrap_or(0.0)));
            }
        }
        Value::String(s) => {
            let _ = write!(out, "{}", Value::String(s.clone()));
        }
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                if let Some(level) = indent {
                    newline(out, level + 1);
                }
                write_json(out, item, indent.map(|l| l + 1));
            }
            if let Some(level) = indent {
                newline(out, level);
            }
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push('{');
            for (i, (key, item)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                if let Some(level) = indent {
                    newline(out, level + 1);
                }
                let _ = write!(out, "{}:", Value::String(key.clone()));
                if indent.is_some() {
                    out.push(' ');
                }
                write_json(out, item, indent.map(|l| l + 1));
            }
            if let Some(level) = indent {
                newline(out, level);
            }
            out.push('}');
        }
    }
}

fn newline(out: &mut String, level: usize) {
    out.push('\n');
    for _ in 0..level {
        out.push_str("  ");
    }
}

/// One compact line, no trailing newline. Object keys are emitted in sorted
/// order and floats at fixed precision, so identical values give identical
/// bytes.
pub fn to_json_line<T: Serialize>(value: &T) -> Result<String, FormatError> {
    let v = serde_json::to_value(value)
        .map_err(|e| FormatError::Invalid(format!("serialization failed: {e}")))?;
    let mut out = String::new();
    write_json(&mut out, &v, None);
    Ok(out)
}

/// Indented document form with the same determinism guarantees.
pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String, FormatError> {
    let v = serde_json::to_value(value)
        .map_err(|e| FormatError::Invalid(format!("serialization failed: {e}")))?;
    let mut out = String::new();
    write_json(&mut out, &v, Some(0));
    out.push('\n');
    Ok(out)
}

/// Reads a line-delimited file, pairing each record with its 1-based line
/// number. Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, FormatError> {
    let file = fs::File::open(path).map_err(|e| FormatError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| FormatError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| FormatError::Line {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push((idx + 1, record));
    }
    Ok(out)
}

/// Writes records one per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), FormatError> {
    let mut file = fs::File::create(path).map_err(|e| FormatError::io(path, e))?;
    for record in records {
        let line = to_json_line(record)?;
        writeln!(file, "{line}").map_err(|e| FormatError::io(path, e))?;
    }
    Ok(())
}

/// Reads one structured document.
pub fn read_document<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FormatError::Document {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Writes one structured document, indented.
pub fn write_document<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let text = to_json_pretty(value)?;
    fs::write(path, text).map_err(|e| FormatError::io(path, e))
}

/// A coordinate system as declared in configuration: sign rows of a
/// sequential binary partition plus balance names. Validated and expanded
/// into an orthonormal basis at load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisDoc {
    pub sbp: Vec<Vec<i8>>,
    pub names: Vec<String>,
}

impl BasisDoc {
    pub fn build(&self) -> Result<ContrastBasis, FormatError> {
        sbp_to_basis(&self.sbp, &self.names)
            .map_err(|e| FormatError::Invalid(format!("basis: {e}")))
    }
}

/// A policy constraint as declared in configuration. Coefficients are keyed
/// by part id and must sum to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintDoc {
    pub name: String,
    pub coeffs: BTreeMap<String, f64>,
    pub threshold: f64,
}

fn build_safe_set(
    constraints: &[ConstraintDoc],
    include_share_barriers: bool,
) -> Result<SafeSet, FormatError> {
    let mut built = Vec::with_capacity(constraints.len());
    for c in constraints {
        built.push(
            LogContrastConstraint::new(c.name.clone(), c.coeffs.clone(), c.threshold)
                .map_err(|e| FormatError::Invalid(format!("constraint {:?}: {e}", c.name)))?,
        );
    }
    SafeSet::new(built, include_share_barriers)
        .map_err(|e| FormatError::Invalid(format!("constraints: {e}")))
}

/// The monitor configuration document. Only `groups` and `basis` are
/// required; tuning blocks fall back to library defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDoc {
    pub groups: Vec<String>,
    pub basis: BasisDoc,
    #[serde(default)]
    pub constraints: Vec<ConstraintDoc>,
    #[serde(default)]
    pub include_share_barriers: bool,
    #[serde(default)]
    pub health: Option<driftwatch_core::lineage::HealthThresholds>,
    #[serde(default)]
    pub drift: Option<driftwatch_core::drift::DriftParams>,
    #[serde(default)]
    pub reference: Option<driftwatch_core::boundary::ReferenceParams>,
    #[serde(default)]
    pub warning: Option<driftwatch_core::monitor::WarningParams>,
    #[serde(default)]
    pub boundary: Option<driftwatch_core::monitor::BoundaryParams>,
    #[serde(default)]
    pub zeros: Option<driftwatch_core::monitor::ZeroPolicy>,
    #[serde(default)]
    pub attribution_k: Option<usize>,
    #[serde(default)]
    pub other_top_k: Option<usize>,
    #[serde(default)]
    pub other_window: Option<usize>,
    #[serde(default)]
    pub other_growth_ratio: Option<f64>,
    #[serde(default)]
    pub drill_stability_window: Option<u64>,
}

impl ConfigDoc {
    pub fn build(&self) -> Result<MonitorConfig, FormatError> {
        let groups = CanonicalGroups::new(self.groups.clone())
            .map_err(|e| FormatError::Invalid(format!("groups: {e}")))?;
        let basis = self.basis.build()?;
        let safe_set = build_safe_set(&self.constraints, self.include_share_barriers)?;
        let mut config = MonitorConfig::new(groups, basis, safe_set);
        if let Some(v) = self.health {
            config.health = v;
        }
        if let Some(v) = self.drift {
            config.drift = v;
        }
        if let Some(v) = self.reference {
            config.reference = v;
        }
        if let Some(v) = self.warning {
            config.warning = v;
        }
        if let Some(v) = self.boundary {
            config.boundary = v;
        }
        if let Some(v) = &self.zeros {
            config.zeros = v.clone();
        }
        if let Some(v) = self.attribution_k {
            config.attribution_k = v;
        }
        if let Some(v) = self.other_top_k {
            config.other_top_k = v;
        }
        if let Some(v) = self.other_window {
            config.other_window = v;
        }
        if let Some(v) = self.other_growth_ratio {
            config.other_growth_ratio = v;
        }
        if let Some(v) = self.drill_stability_window {
            config.drill_stability_window = v;
        }
        Ok(config)
    }
}

/// The generator scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDoc {
    pub groups: Vec<String>,
    pub basis: BasisDoc,
    pub z0: Vec<f64>,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub leaves: Vec<LeafTemplate>,
    #[serde(default)]
    pub churn: Vec<ChurnSpec>,
    #[serde(default)]
    pub constraints: Vec<ConstraintDoc>,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    pub seed: u64,
}

fn default_confidence() -> f64 {
    1.0
}

impl ScenarioDoc {
    pub fn build(&self) -> Result<ScenarioSpec, FormatError> {
        let groups = CanonicalGroups::new(self.groups.clone())
            .map_err(|e| FormatError::Invalid(format!("groups: {e}")))?;
        let basis = self.basis.build()?;
        let mut spec = ScenarioSpec::new(
            groups,
            basis,
            self.z0.clone(),
            self.segments.clone(),
            self.seed,
        );
        spec.leaves = self.leaves.clone();
        spec.churn = self.churn.clone();
        spec.safe_set = build_safe_set(&self.constraints, false)?;
        spec.confidence = self.confidence;
        Ok(spec)
    }
}
