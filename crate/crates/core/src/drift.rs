//! Robust estimation of the drift signal in balance coordinates.
//!
//! The raw signal is the per-step displacement `dz` between consecutive
//! balance vectors. A [`DriftEstimate`] maintains an exponentially weighted
//! moving average of that displacement, winsorizing each component against a
//! running median/MAD window first so a single spiky step cannot swing the
//! estimate. From the smoothed displacement we read off a magnitude and —
//! when it is meaningfully nonzero — a unit direction.
//!
//! [`EnergyProfile`] summarizes where movement concentrated over a window
//! (sum of squared displacements per balance, plus the full second-moment
//! matrix so the same window can be re-examined in a rotated basis), and
//! [`attribute`] turns a displacement into a ranked list of named balances.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coda::{BalanceVector, ContrastBasis};
use crate::stats::{mad, median};

/// MAD values below this floor are treated as this floor when clamping, so a
/// perfectly quiet window still admits (tiny) movement instead of dividing
/// by zero.
pub const MAD_FLOOR: f64 = 1e-12;

/// Displacements with norm at or below this are treated as "no drift" by
/// attribution and direction logic.
pub const NO_DRIFT_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("balance vectors come from different bases ({left:?} vs {right:?})")]
    BasisMismatch { left: String, right: String },
    #[error("window contains no displacement samples")]
    EmptyWindow,
    #[error("top-k must be at least 1")]
    ZeroTopK,
    #[error("sensitivity needs at least two bases, got {0}")]
    NeedTwoBases(usize),
    #[error("bases cover different part counts: {0:?}")]
    MixedBases(Vec<usize>),
}

/// Tuning for [`DriftEstimate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftParams {
    /// EWMA weight on the newest (winsorized) displacement.
    pub lambda: f64,
    /// Half-width of the winsorizing interval, in running MADs around the
    /// running median.
    pub clip: f64,
    /// Smoothed magnitudes below this yield no direction estimate.
    pub direction_floor: f64,
    /// Length of the per-component ring buffer behind the running
    /// median/MAD.
    pub mad_window: usize,
    /// Number of initial samples accepted without winsorizing, while the
    /// running statistics are still unfounded.
    pub cold_start: usize,
}

impl Default for DriftParams {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            clip: 3.0,
            direction_floor: 1e-8,
            mad_window: 32,
            cold_start: 8,
        }
    }
}

/// Exponentially smoothed displacement estimate with per-component
/// winsorization.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftEstimate {
    params: DriftParams,
    smoothed: Vec<f64>,
    windows: Vec<VecDeque<f64>>,
    accepted: u64,
    rejected: u64,
}

impl DriftEstimate {
    pub fn new(dim: usize, params: DriftParams) -> Self {
        Self {
            params,
            smoothed: vec![0.0; dim],
            windows: vec![VecDeque::with_capacity(params.mad_window); dim],
            accepted: 0,
            rejected: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.smoothed.len()
    }

    pub fn params(&self) -> &DriftParams {
        &self.params
    }

    /// Displacement samples folded into the estimate so far.
    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    /// Displacement samples dropped for containing non-finite values.
    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    /// The current smoothed displacement per balance.
    pub fn smoothed(&self) -> &[f64] {
        &self.smoothed
    }

    /// Euclidean norm of the smoothed displacement.
    pub fn magnitude(&self) -> f64 {
        self.smoothed.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// Unit direction of the smoothed displacement, or `None` while its
    /// magnitude sits below the configured floor.
    pub fn direction(&self) -> Option<Vec<f64>> {
        let m = self.magnitude();
        if m < self.params.direction_floor {
            return None;
        }
        Some(self.smoothed.iter().map(|c| c / m).collect())
    }

    /// Folds one displacement into the estimate. Non-finite samples are
    /// counted and skipped, leaving the estimate unchanged; the return value
    /// says whether the sample was accepted.
    pub fn update(&mut self, dz: &[f64]) -> Result<bool, DriftError> {
        if dz.len() != self.smoothed.len() {
            return Err(DriftError::DimensionMismatch {
                expected: self.smoothed.len(),
                got: dz.len(),
            });
        }
        if dz.iter().any(|v| !v.is_finite()) {
            self.rejected += 1;
            return Ok(false);
        }
        let winsorize = self.accepted >= self.params.cold_start as u64;
        let lambda = self.params.lambda;
        for (j, &raw) in dz.iter().enumerate() {
            let window = &mut self.windows[j];
            let used = if winsorize && !window.is_empty() {
                let samples: Vec<f64> = window.iter().copied().collect();
                let center = median(&samples);
                let spread = mad(&samples).max(MAD_FLOOR);
                let half = self.params.clip * spread;
                raw.clamp(center - half, center + half)
            } else {
                raw
            };
            window.push_back(raw);
            while window.len() > self.params.mad_window {
                window.pop_front();
            }
            self.smoothed[j] = (1.0 - lambda) * self.smoothed[j] + lambda * used;
        }
        self.accepted += 1;
        Ok(true)
    }
}

/// The displacement between consecutive balance vectors. Both must carry the
/// same basis reference.
pub fn delta_z(prev: &BalanceVector, next: &BalanceVector) -> Result<Vec<f64>, DriftError> {
    if prev.basis_ref != next.basis_ref {
        return Err(DriftError::BasisMismatch {
            left: prev.basis_ref.clone(),
            right: next.basis_ref.clone(),
        });
    }
    if prev.dim() != next.dim() {
        return Err(DriftError::DimensionMismatch {
            expected: prev.dim(),
            got: next.dim(),
        });
    }
    Ok(next
        .coords
        .iter()
        .zip(&prev.coords)
        .map(|(n, p)| n - p)
        .collect())
}

/// Where displacement energy concentrated over a window of steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyProfile {
    /// Sum of squared displacements per balance.
    pub energy: Vec<f64>,
    /// Number of displacement samples in the window.
    pub steps: usize,
    /// The accumulated outer-product matrix of displacements. Its diagonal
    /// equals `energy`; keeping the full matrix lets the same window be
    /// scored under a rotated basis without replaying the series.
    pub second_moment: Vec<Vec<f64>>,
}

impl EnergyProfile {
    pub fn dim(&self) -> usize {
        self.energy.len()
    }

    pub fn total(&self) -> f64 {
        self.energy.iter().sum()
    }

    /// Indices of the `k` highest-energy balances, ties broken toward the
    /// lower index.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        top_k_by_magnitude(&self.energy, k)
    }
}

/// Accumulates the per-balance energy of a displacement series.
pub fn energy(series: &[Vec<f64>]) -> Result<EnergyProfile, DriftError> {
    let Some(first) = series.first() else {
        return Err(DriftError::EmptyWindow);
    };
    let dim = first.len();
    let mut energy = vec![0.0; dim];
    let mut second = vec![vec![0.0; dim]; dim];
    for dz in series {
        if dz.len() != dim {
            return Err(DriftError::DimensionMismatch {
                expected: dim,
                got: dz.len(),
            });
        }
        for i in 0..dim {
            for j in 0..dim {
                second[i][j] += dz[i] * dz[j];
            }
        }
        for (e, v) in energy.iter_mut().zip(dz) {
            *e += v * v;
        }
    }
    Ok(EnergyProfile {
        energy,
        steps: series.len(),
        second_moment: second,
    })
}

/// One ranked balance in an [`Attribution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionEntry {
    pub balance: String,
    pub index: usize,
    /// Signed displacement along this balance.
    pub value: f64,
}

/// The balances that explain a displacement, largest magnitude first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub entries: Vec<AttributionEntry>,
    /// True when the displacement norm is negligible; `entries` is then
    /// empty rather than ranking noise.
    pub no_drift: bool,
}

/// Ranks the top `k` balances of `diff` by absolute value (ties toward the
/// lower index), naming them from the basis. `k` is clamped to the number of
/// balances; zero is rejected.
pub fn attribute(
    diff: &[f64],
    basis: &ContrastBasis,
    k: usize,
) -> Result<Attribution, DriftError> {
    if k == 0 {
        return Err(DriftError::ZeroTopK);
    }
    if diff.len() != basis.dim() {
        return Err(DriftError::DimensionMismatch {
            expected: basis.dim(),
            got: diff.len(),
        });
    }
    let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= NO_DRIFT_NORM {
        return Ok(Attribution {
            entries: Vec::new(),
            no_drift: true,
        });
    }
    let entries = top_k_by_magnitude(diff, k)
        .into_iter()
        .map(|i| AttributionEntry {
            balance: basis.names()[i].clone(),
            index: i,
            value: diff[i],
        })
        .collect();
    Ok(Attribution {
        entries,
        no_drift: false,
    })
}

fn top_k_by_magnitude(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.cmp(&b))
    });
    order.truncate(k.min(values.len()));
    order
}

/// How stable a top-`k` attribution is across alternative balance bases over
/// the same parts.
///
/// `series` holds displacement samples expressed in `bases[0]`. For every
/// basis the same window is re-scored (through the shared second-moment
/// matrix), the top-`k` balances are found, and the leaf parts appearing on
/// either side of those balances are collected. The score is the mean
/// pairwise Jaccard overlap of those part sets across bases: 1.0 means every
/// basis blames the same parts, values near 0 mean the story depends on the
/// coordinate system.
pub fn attribution_sensitivity(
    series: &[Vec<f64>],
    bases: &[ContrastBasis],
    k: usize,
) -> Result<f64, DriftError> {
    if bases.len() < 2 {
        return Err(DriftError::NeedTwoBases(bases.len()));
    }
    if k == 0 {
        return Err(DriftError::ZeroTopK);
    }
    let parts = bases[0].parts();
    let sizes: Vec<usize> = bases.iter().map(|b| b.parts()).collect();
    if sizes.iter().any(|&s| s != parts) {
        return Err(DriftError::MixedBases(sizes));
    }
    let profile = energy(series)?;
    if profile.dim() != bases[0].dim() {
        return Err(DriftError::DimensionMismatch {
            expected: bases[0].dim(),
            got: profile.dim(),
        });
    }

    let mut part_sets: Vec<std::collections::BTreeSet<usize>> = Vec::with_capacity(bases.len());
    for basis in bases {
        // Rotation from bases[0] coordinates into this basis: R = V_b V_0^T.
        let dim = basis.dim();
        let mut rotation = vec![vec![0.0; dim]; dim];
        for (r, row_b) in rotation.iter_mut().zip(basis.contrast()) {
            for (cell, row_0) in r.iter_mut().zip(bases[0].contrast()) {
                *cell = row_b
                    .iter()
                    .zip(row_0)
                    .map(|(x, y)| x * y)
                    .sum();
            }
        }
        // Energy under rotation: diag(R M R^T).
        let m = &profile.second_moment;
        let mut rotated_energy = vec![0.0; dim];
        for (e, r) in rotated_energy.iter_mut().zip(&rotation) {
            let mut acc = 0.0;
            for (i, &ri) in r.iter().enumerate() {
                for (j, &rj) in r.iter().enumerate() {
                    acc += ri * m[i][j] * rj;
                }
            }
            *e = acc.max(0.0);
        }
        let mut set = std::collections::BTreeSet::new();
        for idx in top_k_by_magnitude(&rotated_energy, k) {
            set.extend(basis.numerator(idx));
            set.extend(basis.denominator(idx));
        }
        part_sets.push(set);
    }

    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..part_sets.len() {
        for j in i + 1..part_sets.len() {
            let inter = part_sets[i].intersection(&part_sets[j]).count() as f64;
            let union = part_sets[i].union(&part_sets[j]).count() as f64;
            total += if union > 0.0 { inter / union } else { 1.0 };
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coda::{pivot_basis, sbp_to_basis};
    use approx::assert_relative_eq;

    #[test]
    fn constant_updates_converge_to_input() {
        let mut est = DriftEstimate::new(2, DriftParams::default());
        for _ in 0..200 {
            est.update(&[0.5, -0.25]).unwrap();
        }
        assert_relative_eq!(est.smoothed()[0], 0.5, epsilon = 1e-10);
        assert_relative_eq!(est.smoothed()[1], -0.25, epsilon = 1e-10);
        assert_relative_eq!(est.magnitude(), (0.5f64 * 0.5 + 0.0625).sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn outlier_is_winsorized() {
        let mut est = DriftEstimate::new(1, DriftParams::default());
        for _ in 0..20 {
            est.update(&[1.0]).unwrap();
        }
        let before = est.smoothed()[0];
        est.update(&[100.0]).unwrap();
        let after = est.smoothed()[0];
        // The spike is clamped to median +/- clip * MAD of a window of ones,
        // so the estimate barely moves.
        assert!((after - before).abs() < 0.1 * before);

        let mut unclipped = DriftEstimate::new(
            1,
            DriftParams {
                clip: f64::INFINITY,
                ..DriftParams::default()
            },
        );
        for _ in 0..20 {
            unclipped.update(&[1.0]).unwrap();
        }
        unclipped.update(&[100.0]).unwrap();
        assert!(unclipped.smoothed()[0] > 10.0);
    }

    #[test]
    fn cold_start_accepts_raw_samples() {
        let mut est = DriftEstimate::new(1, DriftParams::default());
        // Early samples are taken as-is even when wildly different; with
        // winsorizing active the second sample would have been clamped near
        // the first.
        est.update(&[10.0]).unwrap();
        est.update(&[-10.0]).unwrap();
        assert_eq!(est.accepted(), 2);
        assert_relative_eq!(est.smoothed()[0], 0.8 * 2.0 - 0.2 * 10.0, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_samples_rejected_without_change() {
        let mut est = DriftEstimate::new(2, DriftParams::default());
        est.update(&[0.1, 0.2]).unwrap();
        let snapshot = est.smoothed().to_vec();
        let accepted = est.update(&[f64::NAN, 0.0]).unwrap();
        assert!(!accepted);
        assert_eq!(est.smoothed(), snapshot.as_slice());
        assert_eq!(est.rejected(), 1);
        assert!(matches!(
            est.update(&[0.1, 0.2, 0.3]),
            Err(DriftError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn direction_needs_magnitude() {
        let mut est = DriftEstimate::new(2, DriftParams::default());
        assert!(est.direction().is_none());
        for _ in 0..50 {
            est.update(&[3e-2, 4e-2]).unwrap();
        }
        let dir = est.direction().unwrap();
        assert_relative_eq!(dir[0], 0.6, epsilon = 1e-6);
        assert_relative_eq!(dir[1], 0.8, epsilon = 1e-6);
        assert_relative_eq!(dir.iter().map(|c| c * c).sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn delta_z_checks_basis() {
        let b = pivot_basis(3).unwrap();
        let b2 = sbp_to_basis(
            &[vec![1, -1, 0], vec![1, 1, -1]],
            &["x".into(), "y".into()],
        )
        .unwrap();
        let z1 = BalanceVector::new(vec![0.0, 0.0], &b);
        let z2 = BalanceVector::new(vec![0.5, -0.5], &b);
        let dz = delta_z(&z1, &z2).unwrap();
        assert_eq!(dz, vec![0.5, -0.5]);
        let z3 = BalanceVector::new(vec![0.5, -0.5], &b2);
        assert!(matches!(
            delta_z(&z1, &z3),
            Err(DriftError::BasisMismatch { .. })
        ));
    }

    #[test]
    fn energy_nonnegative_and_additive() {
        let s1 = vec![vec![0.1, -0.2], vec![0.3, 0.0]];
        let s2 = vec![vec![-0.1, 0.4]];
        let whole: Vec<Vec<f64>> = s1.iter().chain(&s2).cloned().collect();
        let e1 = energy(&s1).unwrap();
        let e2 = energy(&s2).unwrap();
        let ew = energy(&whole).unwrap();
        for j in 0..2 {
            assert!(e1.energy[j] >= 0.0);
            assert_relative_eq!(
                ew.energy[j],
                e1.energy[j] + e2.energy[j],
                epsilon = 1e-15
            );
        }
        for i in 0..2 {
            assert_relative_eq!(ew.second_moment[i][i], ew.energy[i], epsilon = 1e-15);
            for j in 0..2 {
                assert_relative_eq!(
                    ew.second_moment[i][j],
                    e1.second_moment[i][j] + e2.second_moment[i][j],
                    epsilon = 1e-15
                );
            }
        }
        assert!(matches!(energy(&[]), Err(DriftError::EmptyWindow)));
    }

    #[test]
    fn attribute_ranks_by_magnitude_with_stable_ties() {
        let basis = pivot_basis(4).unwrap();
        let att = attribute(&[0.1, -0.5, 0.1], &basis, 2).unwrap();
        assert!(!att.no_drift);
        assert_eq!(att.entries.len(), 2);
        assert_eq!(att.entries[0].index, 1);
        assert_relative_eq!(att.entries[0].value, -0.5);
        // Tie between indices 0 and 2 resolves to the lower index.
        assert_eq!(att.entries[1].index, 0);
        assert_eq!(att.entries[0].balance, "b1");
    }

    #[test]
    fn attribute_flags_no_drift() {
        let basis = pivot_basis(3).unwrap();
        let att = attribute(&[1e-13, -1e-14], &basis, 2).unwrap();
        assert!(att.no_drift);
        assert!(att.entries.is_empty());
        assert!(matches!(
            attribute(&[0.1, 0.2], &basis, 0),
            Err(DriftError::ZeroTopK)
        ));
    }

    #[test]
    fn sensitivity_is_one_for_identical_bases() {
        let b = pivot_basis(4).unwrap();
        let series = vec![vec![0.5, 0.01, 0.0], vec![0.4, 0.0, 0.02]];
        let s = attribution_sensitivity(&series, &[b.clone(), b], 1).unwrap();
        assert_relative_eq!(s, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sensitivity_is_one_when_k_covers_all_parts() {
        let b1 = pivot_basis(3).unwrap();
        let b2 = sbp_to_basis(
            &[vec![1, -1, 0], vec![1, 1, -1]],
            &["x".into(), "y".into()],
        )
        .unwrap();
        let series = vec![vec![0.5, -0.2], vec![0.1, 0.3]];
        // k equals the full dimension, so every part appears in every set.
        let s = attribution_sensitivity(&series, &[b1, b2], 2).unwrap();
        assert_relative_eq!(s, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sensitivity_rejects_degenerate_inputs() {
        let b = pivot_basis(3).unwrap();
        let series = vec![vec![0.5, -0.2]];
        assert!(matches!(
            attribution_sensitivity(&series, std::slice::from_ref(&b), 1),
            Err(DriftError::NeedTwoBases(1))
        ));
        let b4 = pivot_basis(4).unwrap();
        assert!(matches!(
            attribution_sensitivity(&series, &[b.clone(), b4], 1),
            Err(DriftError::MixedBases(_))
        ));
    }
}
