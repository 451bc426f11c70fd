//! Safe-operating-envelope diagnostics on the simplex.
//!
//! An envelope is described by log-contrast constraints `h(x) = sum_i a_i *
//! log x_i - b <= 0` whose coefficients sum to zero, which makes them
//! invariant under closure — they constrain ratios, not raw totals. Ratio
//! caps are the canonical example: `x_f / x_r <= c` is `log x_f - log x_r -
//! log c <= 0`.
//!
//! Given a current position and a drift direction in balance coordinates,
//! [`step_to_boundary`] computes the exact distance (in Aitchison units)
//! until the first constraint is hit. Along an ilr ray every log-contrast is
//! affine in the step length, so the crossing is a one-liner per constraint;
//! [`bisect_to_boundary`] re-derives the same number by bisection through
//! actual compositions and serves as an independent check on the algebra.
//!
//! [`ReferenceState`] maintains the "normal operating point" that distances
//! are measured from: it learns a mean over a warm-up window, then tracks
//! slowly, and can be frozen during incidents so the baseline is not dragged
//! toward the anomaly it should flag.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coda::{ilr_inv, BalanceVector, CodaError, Composition, ContrastBasis, VALUE_FLOOR};

/// Tolerance on the zero-sum requirement for constraint coefficients.
pub const COEFF_SUM_TOL: f64 = 1e-12;

/// Tolerance on the unit-norm requirement for step directions.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BoundaryError {
    #[error("constraint {constraint:?}: coefficients sum to {sum}, not zero")]
    CoefficientsNotZeroSum { constraint: String, sum: f64 },
    #[error("constraint {constraint:?} has no nonzero coefficients")]
    NoCoefficients { constraint: String },
    #[error("constraint {constraint:?} has a non-finite coefficient or threshold")]
    NonFinite { constraint: String },
    #[error("duplicate constraint name {0:?}")]
    DuplicateConstraint(String),
    #[error("constraint {constraint:?} references part {part:?}, which is not present")]
    UnknownPart { constraint: String, part: String },
    #[error("composition parts do not match the compiled envelope: {0}")]
    Misaligned(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("direction must have unit norm, got {0}")]
    NotUnitDirection(f64),
    #[error("position is not strictly inside the envelope; violated: {violated:?}")]
    NotInside { violated: Vec<String> },
    #[error(transparent)]
    Coda(#[from] CodaError),
}

/// One closure-invariant constraint `sum_i coeffs[i] * log x_i <= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogContrastConstraint {
    pub name: String,
    /// Part id -> coefficient. Coefficients must sum to zero.
    pub coeffs: BTreeMap<String, f64>,
    pub threshold: f64,
}

impl LogContrastConstraint {
    pub fn new(
        name: impl Into<String>,
        coeffs: BTreeMap<String, f64>,
        threshold: f64,
    ) -> Result<Self, BoundaryError> {
        let name = name.into();
        if coeffs.values().any(|c| !c.is_finite()) || !threshold.is_finite() {
            return Err(BoundaryError::NonFinite { constraint: name });
        }
        if coeffs.values().all(|c| *c == 0.0) {
            return Err(BoundaryError::NoCoefficients { constraint: name });
        }
        let sum: f64 = coeffs.values().sum();
        if sum.abs() > COEFF_SUM_TOL {
            return Err(BoundaryError::CoefficientsNotZeroSum {
                constraint: name,
                sum,
            });
        }
        Ok(Self {
            name,
            coeffs,
            threshold,
        })
    }

    /// A ratio cap `x_num / x_den <= limit` as a log-contrast constraint.
    pub fn ratio_cap(
        name: impl Into<String>,
        numerator: impl Into<String>,
        denominator: impl Into<String>,
        limit: f64,
    ) -> Result<Self, BoundaryError> {
        let name = name.into();
        if !(limit.is_finite() && limit > 0.0) {
            return Err(BoundaryError::NonFinite { constraint: name });
        }
        let mut coeffs = BTreeMap::new();
        coeffs.insert(numerator.into(), 1.0);
        coeffs.insert(denominator.into(), -1.0);
        LogContrastConstraint::new(name, coeffs, limit.ln())
    }

    /// `h(x)`: negative strictly inside, zero on the boundary.
    pub fn margin(&self, x: &Composition) -> Result<f64, BoundaryError> {
        let mut acc = -self.threshold;
        for (part, coeff) in &self.coeffs {
            let v = x.get(part).ok_or_else(|| BoundaryError::UnknownPart {
                constraint: self.name.clone(),
                part: part.clone(),
            })?;
            acc += coeff * v.max(VALUE_FLOOR).ln();
        }
        Ok(acc)
    }
}

/// A named set of log-contrast constraints, optionally combined with the
/// implicit share barriers (`x_i > 0`) in the barrier composite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeSet {
    pub constraints: Vec<LogContrastConstraint>,
    /// Include `-sum_i log x_i` in [`log_barrier`]. Share barriers never
    /// terminate an ilr ray (shares stay positive along it), so this flag
    /// does not affect [`step_to_boundary`].
    pub include_share_barriers: bool,
}

impl SafeSet {
    pub fn new(
        constraints: Vec<LogContrastConstraint>,
        include_share_barriers: bool,
    ) -> Result<Self, BoundaryError> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &constraints {
            if !seen.insert(c.name.clone()) {
                return Err(BoundaryError::DuplicateConstraint(c.name.clone()));
            }
        }
        Ok(Self {
            constraints,
            include_share_barriers,
        })
    }

    pub fn empty() -> Self {
        Self {
            constraints: Vec::new(),
            include_share_barriers: true,
        }
    }

    /// Resolves part names against a fixed part order, yielding dense
    /// coefficient vectors aligned with that order.
    pub fn compile(&self, part_ids: &[String]) -> Result<CompiledSafeSet, BoundaryError> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.constraints {
            if !seen.insert(c.name.clone()) {
                return Err(BoundaryError::DuplicateConstraint(c.name.clone()));
            }
        }
        let mut compiled = Vec::with_capacity(self.constraints.len());
        for c in &self.constraints {
            let mut coeffs = vec![0.0; part_ids.len()];
            for (part, coeff) in &c.coeffs {
                let idx = part_ids.iter().position(|p| p == part).ok_or_else(|| {
                    BoundaryError::UnknownPart {
                        constraint: c.name.clone(),
                        part: part.clone(),
                    }
                })?;
                coeffs[idx] = *coeff;
            }
            compiled.push(CompiledConstraint {
                name: c.name.clone(),
                coeffs,
                threshold: c.threshold,
            });
        }
        Ok(CompiledSafeSet {
            part_ids: part_ids.to_vec(),
            constraints: compiled,
            include_share_barriers: self.include_share_barriers,
        })
    }
}

/// A constraint with coefficients resolved to a fixed part order.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledConstraint {
    pub name: String,
    pub coeffs: Vec<f64>,
    pub threshold: f64,
}

impl CompiledConstraint {
    fn margin_logs(&self, logs: &[f64]) -> f64 {
        self.coeffs
            .iter()
            .zip(logs)
            .map(|(a, l)| a * l)
            .sum::<f64>()
            - self.threshold
    }
}

/// A [`SafeSet`] bound to a specific part order.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledSafeSet {
    pub part_ids: Vec<String>,
    pub constraints: Vec<CompiledConstraint>,
    pub include_share_barriers: bool,
}

impl CompiledSafeSet {
    fn check_parts(&self, x: &Composition) -> Result<(), BoundaryError> {
        if x.ids() != self.part_ids.as_slice() {
            return Err(BoundaryError::Misaligned(format!(
                "expected parts {:?}, got {:?}",
                self.part_ids,
                x.ids()
            )));
        }
        Ok(())
    }

    /// `h_j(x)` for every constraint, in declaration order.
    pub fn margins(&self, x: &Composition) -> Result<Vec<(String, f64)>, BoundaryError> {
        self.check_parts(x)?;
        let logs: Vec<f64> = x.values().iter().map(|v| v.max(VALUE_FLOOR).ln()).collect();
        Ok(self
            .constraints
            .iter()
            .map(|c| (c.name.clone(), c.margin_logs(&logs)))
            .collect())
    }
}

/// `-sum_i log x_i`: grows as any share approaches zero; minimized at the
/// uniform composition, where it equals `D * log D`.
pub fn barrier_index(x: &Composition) -> f64 {
    -x.values()
        .iter()
        .map(|v| v.max(VALUE_FLOOR).ln())
        .sum::<f64>()
}

/// The barrier composite over an envelope: finite strictly inside, marked
/// violated (conceptually infinite) on or outside any constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum LogBarrier {
    Finite { value: f64 },
    Violated { constraints: Vec<String> },
}

/// Evaluates `-sum log x_i - sum_j log(-h_j(x))` (the first term only when
/// share barriers are included in the envelope).
pub fn log_barrier(x: &Composition, omega: &CompiledSafeSet) -> Result<LogBarrier, BoundaryError> {
    let margins = omega.margins(x)?;
    let violated: Vec<String> = margins
        .iter()
        .filter(|(_, h)| *h >= 0.0)
        .map(|(name, _)| name.clone())
        .collect();
    if !violated.is_empty() {
        return Ok(LogBarrier::Violated {
            constraints: violated,
        });
    }
    let mut value = if omega.include_share_barriers {
        barrier_index(x)
    } else {
        0.0
    };
    for (_, h) in &margins {
        value -= (-h).ln();
    }
    Ok(LogBarrier::Finite { value })
}

/// Outcome of casting a ray from the current position along the drift
/// direction until it leaves the envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum StepToBoundary {
    /// The ray hits `constraint` after `lambda` Aitchison units.
    Crossing { lambda: f64, constraint: String },
    /// A crossing exists but lies beyond the reporting horizon.
    BeyondHorizon { lambda_max: f64 },
    /// No constraint ever crosses along this ray.
    InwardInfinite,
}

/// Exact distance along the unit ilr ray `z + lambda * u` to the first
/// constraint boundary of `omega`. Positions must be strictly inside.
///
/// Along such a ray every log-contrast margin is affine in `lambda`
/// (`h(lambda) = h(0) + lambda * slope`), so each constraint either recedes
/// (slope <= 0) or is crossed at `-h(0) / slope`.
pub fn step_to_boundary(
    z: &BalanceVector,
    direction: &[f64],
    omega: &CompiledSafeSet,
    basis: &ContrastBasis,
    lambda_max: f64,
    eps: f64,
) -> Result<StepToBoundary, BoundaryError> {
    z.check_basis(basis)?;
    if direction.len() != basis.dim() || z.dim() != basis.dim() {
        return Err(BoundaryError::DimensionMismatch {
            expected: basis.dim(),
            got: direction.len(),
        });
    }
    if omega.part_ids.len() != basis.parts() {
        return Err(BoundaryError::DimensionMismatch {
            expected: basis.parts(),
            got: omega.part_ids.len(),
        });
    }
    let norm = direction.iter().map(|c| c * c).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(BoundaryError::NotUnitDirection(norm));
    }

    let clr_z = to_clr(&z.coords, basis);
    let clr_u = to_clr(direction, basis);
    let margins: Vec<f64> = omega
        .constraints
        .iter()
        .map(|c| c.margin_logs(&clr_z))
        .collect();
    let violated: Vec<String> = omega
        .constraints
        .iter()
        .zip(&margins)
        .filter(|(_, h)| **h >= 0.0)
        .map(|(c, _)| c.name.clone())
        .collect();
    if !violated.is_empty() {
        return Err(BoundaryError::NotInside { violated });
    }

    let mut best: Option<(f64, &CompiledConstraint)> = None;
    for (c, &h0) in omega.constraints.iter().zip(&margins) {
        let slope: f64 = c.coeffs.iter().zip(&clr_u).map(|(a, g)| a * g).sum();
        if slope <= 0.0 {
            continue;
        }
        let lambda = -h0 / slope;
        match best {
            Some((l, _)) if l <= lambda => {}
            _ => best = Some((lambda, c)),
        }
    }
    let Some((lambda, constraint)) = best else {
        return Ok(StepToBoundary::InwardInfinite);
    };
    if lambda > lambda_max {
        return Ok(StepToBoundary::BeyondHorizon { lambda_max });
    }
    debug_assert!(
        {
            let check = bisect_to_boundary(z, direction, constraint, omega, basis, lambda + 1.0, eps * 0.1)
                .ok()
                .flatten();
            check.is_some_and(|b| (b - lambda).abs() <= eps.max(1e-9 * lambda.max(1.0)))
        },
        "analytic crossing disagrees with bisection"
    );
    Ok(StepToBoundary::Crossing {
        lambda,
        constraint: constraint.name.clone(),
    })
}

/// Bisection fallback for the crossing distance of a single constraint,
/// evaluating margins through full compositions (`ilr_inv` then logs) rather
/// than the affine shortcut — an independent route for cross-checking
/// [`step_to_boundary`].
///
/// Returns `None` when the margin has not changed sign by `lambda_hi`.
pub fn bisect_to_boundary(
    z: &BalanceVector,
    direction: &[f64],
    constraint: &CompiledConstraint,
    omega: &CompiledSafeSet,
    basis: &ContrastBasis,
    lambda_hi: f64,
    tol: f64,
) -> Result<Option<f64>, BoundaryError> {
    z.check_basis(basis)?;
    if direction.len() != basis.dim() {
        return Err(BoundaryError::DimensionMismatch {
            expected: basis.dim(),
            got: direction.len(),
        });
    }
    let eval = |lambda: f64| -> Result<f64, BoundaryError> {
        let coords: Vec<f64> = z
            .coords
            .iter()
            .zip(direction)
            .map(|(c, u)| c + lambda * u)
            .collect();
        let zl = BalanceVector::new(coords, basis);
        let x = ilr_inv(&zl, basis, &omega.part_ids)?;
        let logs: Vec<f64> = x.values().iter().map(|v| v.max(VALUE_FLOOR).ln()).collect();
        Ok(constraint.margin_logs(&logs))
    };
    let mut lo = 0.0;
    let mut h_lo = eval(lo)?;
    if h_lo >= 0.0 {
        return Err(BoundaryError::NotInside {
            violated: vec![constraint.name.clone()],
        });
    }
    let mut hi = lambda_hi;
    let h_hi = eval(hi)?;
    if h_hi < 0.0 {
        return Ok(None);
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let h_mid = eval(mid)?;
        if h_mid < 0.0 {
            lo = mid;
            h_lo = h_mid;
        } else {
            hi = mid;
        }
    }
    let _ = h_lo;
    Ok(Some(0.5 * (lo + hi)))
}

/// clr vector of balance coordinates: `V^T z`.
fn to_clr(coords: &[f64], basis: &ContrastBasis) -> Vec<f64> {
    let mut clr = vec![0.0; basis.parts()];
    for (row, &c) in basis.contrast().iter().zip(coords) {
        for (acc, w) in clr.iter_mut().zip(row) {
            *acc += c * w;
        }
    }
    clr
}

/// How the reference point is currently maintained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Accumulating a mean over the warm-up window; no reference yet.
    Learning,
    /// Reference established, updated slowly toward the current state.
    Tracking,
    /// Updates suspended (operator freeze or degraded model health).
    Frozen,
}

/// Tuning for [`ReferenceState`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceParams {
    /// Samples averaged before the reference is first established.
    pub warm_up: usize,
    /// Tracking rate: per-step weight on the current state once established.
    pub rate: f64,
}

impl Default for ReferenceParams {
    fn default() -> Self {
        Self {
            warm_up: 28,
            rate: 0.05,
        }
    }
}

/// The slowly adapting "normal operating point" in balance coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceState {
    params: ReferenceParams,
    mode: ReferenceMode,
    basis_ref: String,
    accum: Vec<f64>,
    count: usize,
    z_star: Option<Vec<f64>>,
}

impl ReferenceState {
    pub fn new(dim: usize, basis: &ContrastBasis, params: ReferenceParams) -> Self {
        Self {
            params,
            mode: ReferenceMode::Learning,
            basis_ref: basis.id().to_string(),
            accum: vec![0.0; dim],
            count: 0,
            z_star: None,
        }
    }

    pub fn mode(&self) -> ReferenceMode {
        self.mode
    }

    /// The established reference, if warm-up has completed.
    pub fn reference(&self) -> Option<BalanceVector> {
        self.z_star.as_ref().map(|coords| BalanceVector {
            coords: coords.clone(),
            basis_ref: self.basis_ref.clone(),
        })
    }

    /// Samples absorbed while learning.
    pub fn learned_samples(&self) -> usize {
        self.count
    }

    /// Discards the established reference and starts learning afresh — the
    /// operator "re-baseline" action after an accepted regime change.
    pub fn reset(&mut self) {
        self.mode = ReferenceMode::Learning;
        self.accum.iter_mut().for_each(|a| *a = 0.0);
        self.count = 0;
        self.z_star = None;
    }

    /// Feeds the current state in. `freeze` is the operator hold signal;
    /// `degraded` comes from model health. While either is set the reference
    /// does not move; the freeze lifts as soon as both clear.
    pub fn update(
        &mut self,
        z: &BalanceVector,
        freeze: bool,
        degraded: bool,
    ) -> Result<(), BoundaryError> {
        if z.basis_ref != self.basis_ref {
            return Err(BoundaryError::Misaligned(format!(
                "reference tracks basis {:?}, got {:?}",
                self.basis_ref, z.basis_ref
            )));
        }
        if z.dim() != self.accum.len() {
            return Err(BoundaryError::DimensionMismatch {
                expected: self.accum.len(),
                got: z.dim(),
            });
        }
        if freeze || degraded {
            self.mode = ReferenceMode::Frozen;
            return Ok(());
        }
        if self.mode == ReferenceMode::Frozen {
            self.mode = if self.z_star.is_some() {
                ReferenceMode::Tracking
            } else {
                ReferenceMode::Learning
            };
        }
        match self.mode {
            ReferenceMode::Learning => {
                for (a, c) in self.accum.iter_mut().zip(&z.coords) {
                    *a += c;
                }
                self.count += 1;
                if self.count >= self.params.warm_up {
                    let n = self.count as f64;
                    self.z_star = Some(self.accum.iter().map(|a| a / n).collect());
                    self.mode = ReferenceMode::Tracking;
                }
            }
            ReferenceMode::Tracking => {
                let r = self.params.rate;
                let star = self.z_star.as_mut().expect("tracking implies reference");
                for (s, c) in star.iter_mut().zip(&z.coords) {
                    *s = (1.0 - r) * *s + r * c;
                }
            }
            ReferenceMode::Frozen => unreachable!("cleared above"),
        }
        Ok(())
    }

    /// Aitchison distance from `z` to the reference; `None` until warm-up
    /// completes.
    pub fn distance_to(&self, z: &BalanceVector) -> Result<Option<f64>, BoundaryError> {
        if z.basis_ref != self.basis_ref {
            return Err(BoundaryError::Misaligned(format!(
                "reference tracks basis {:?}, got {:?}",
                self.basis_ref, z.basis_ref
            )));
        }
        Ok(self.z_star.as_ref().map(|star| {
            star.iter()
                .zip(&z.coords)
                .map(|(s, c)| (s - c) * (s - c))
                .sum::<f64>()
                .sqrt()
        }))
    }
}
