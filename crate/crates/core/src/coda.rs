//! Compositions and the Aitchison geometry of the simplex.
//!
//! A [`Composition`] is an ordered list of named, strictly positive parts
//! normalized to sum to one. The group operations are perturbation
//! (componentwise product followed by closure) and powering (componentwise
//! exponentiation followed by closure). Isometric log-ratio (ilr) coordinates
//! map the simplex onto ordinary Euclidean space; the coordinate system is
//! described by a [`ContrastBasis`] built from a sequential binary partition,
//! so each coordinate is an interpretable balance between two blocks of parts.
//!
//! All operations that combine two compositions require the part ids to match
//! in order; nothing is silently reordered or dropped.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance within which a stored composition is considered closed.
pub const CLOSURE_TOL: f64 = 1e-9;

/// Values are clamped to this floor before taking logs and after powering so
/// that extreme exponents degrade gracefully instead of producing zeros.
pub const VALUE_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum CodaError {
    #[error("part {part:?} has non-positive value {value}")]
    NonPositivePart { part: String, value: f64 },
    #[error("part {part:?} has negative value {value}")]
    NegativePart { part: String, value: f64 },
    #[error("composition needs at least two parts, got {0}")]
    TooFewParts(usize),
    #[error("duplicate part id {0:?}")]
    DuplicatePart(String),
    #[error("part ids do not align: {0}")]
    Misaligned(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid sequential binary partition: {0}")]
    InvalidPartition(String),
    #[error("balance vector was built in basis {balance:?} but basis {basis:?} was supplied")]
    BasisMismatch { balance: String, basis: String },
    #[error("all parts are zero; no composition can be recovered")]
    AllZero,
    #[error(
        "replacement {delta} for zero part {part:?} is not below the smallest \
         positive share {min_share}"
    )]
    ReplacementTooLarge {
        part: String,
        delta: f64,
        min_share: f64,
    },
    #[error("replacement for zero part {part:?} must be positive and finite, got {delta}")]
    BadReplacement { part: String, delta: f64 },
}

/// A point on the simplex: named parts, strictly positive, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    ids: Vec<String>,
    values: Vec<f64>,
}

impl Composition {
    /// Builds a composition from named positive parts, normalizing the values
    /// to sum to one. Rejects non-positive or non-finite values, duplicate
    /// ids, and fewer than two parts.
    pub fn closure<I, S>(parts: I) -> Result<Self, CodaError>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (id, v) in parts {
            ids.push(id.into());
            values.push(v);
        }
        if ids.len() < 2 {
            return Err(CodaError::TooFewParts(ids.len()));
        }
        let mut seen = BTreeSet::new();
        for (id, &v) in ids.iter().zip(&values) {
            if !seen.insert(id.clone()) {
                return Err(CodaError::DuplicatePart(id.clone()));
            }
            if !v.is_finite() {
                return Err(CodaError::NonFinite(format!("part {id:?}")));
            }
            if v <= 0.0 {
                return Err(CodaError::NonPositivePart {
                    part: id.clone(),
                    value: v,
                });
            }
        }
        let total: f64 = values.iter().sum();
        if !total.is_finite() || total <= 0.0 {
            return Err(CodaError::NonFinite("sum of parts".into()));
        }
        for v in &mut values {
            *v /= total;
        }
        Ok(Self { ids, values })
    }

    /// The uniform composition over the given part ids.
    pub fn uniform<S: Into<String>>(ids: impl IntoIterator<Item = S>) -> Result<Self, CodaError> {
        Self::closure(ids.into_iter().map(|id| (id, 1.0)))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.ids
            .iter()
            .position(|p| p == id)
            .map(|i| self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().copied())
    }

    fn check_aligned(&self, other: &Self) -> Result<(), CodaError> {
        if self.ids != other.ids {
            return Err(CodaError::Misaligned(format!(
                "left has parts {:?}, right has parts {:?}",
                self.ids, other.ids
            )));
        }
        Ok(())
    }
}

/// Perturbation, the group operation of the simplex: componentwise product
/// followed by closure. Part ids must match in order.
pub fn perturb(x: &Composition, y: &Composition) -> Result<Composition, CodaError> {
    x.check_aligned(y)?;
    let logs: Vec<f64> = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(a, b)| a.max(VALUE_FLOOR).ln() + b.max(VALUE_FLOOR).ln())
        .collect();
    Ok(Composition {
        ids: x.ids.clone(),
        values: close_logs(&logs),
    })
}

/// Powering by a real scalar: componentwise exponentiation followed by
/// closure. `power(-1.0, x)` is the group inverse of `x`.
pub fn power(alpha: f64, x: &Composition) -> Result<Composition, CodaError> {
    if !alpha.is_finite() {
        return Err(CodaError::NonFinite("powering exponent".into()));
    }
    let logs: Vec<f64> = x
        .values
        .iter()
        .map(|v| alpha * v.max(VALUE_FLOOR).ln())
        .collect();
    Ok(Composition {
        ids: x.ids.clone(),
        values: close_logs(&logs),
    })
}

/// The group identity on the parts of `x` (the uniform composition).
pub fn identity_like(x: &Composition) -> Composition {
    let n = x.len() as f64;
    Composition {
        ids: x.ids.clone(),
        values: vec![1.0 / n; x.len()],
    }
}

/// Exponentiates centered logs back onto the simplex, stably.
fn close_logs(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut vals: Vec<f64> = logs.iter().map(|l| (l - max).exp().max(VALUE_FLOOR)).collect();
    let total: f64 = vals.iter().sum();
    for v in &mut vals {
        *v /= total;
    }
    vals
}

/// An orthonormal log-ratio coordinate system for `D`-part compositions,
/// derived from a sequential binary partition. Row `j` of the contrast matrix
/// defines the balance named `names[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastBasis {
    id: String,
    sbp: Vec<Vec<i8>>,
    names: Vec<String>,
    contrast: Vec<Vec<f64>>,
}

impl ContrastBasis {
    /// A stable identifier derived from the partition and balance names; two
    /// bases built from identical inputs share the same id.
    pub fn id(&self) -> &str {
        &self.id
    }

    /// The number of parts `D` the basis applies to.
    pub fn parts(&self) -> usize {
        self.contrast.first().map_or(0, Vec::len)
    }

    /// The number of balance coordinates, `D - 1`.
    pub fn dim(&self) -> usize {
        self.contrast.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn sbp(&self) -> &[Vec<i8>] {
        &self.sbp
    }

    /// The rows of the contrast matrix; each row has unit norm, sums to zero,
    /// and is orthogonal to every other row.
    pub fn contrast(&self) -> &[Vec<f64>] {
        &self.contrast
    }

    /// Part indices entering the numerator (`+1`) of balance `j`.
    pub fn numerator(&self, j: usize) -> Vec<usize> {
        self.sbp[j]
            .iter()
            .enumerate()
            .filter(|(_, s)| **s > 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Part indices entering the denominator (`-1`) of balance `j`.
    pub fn denominator(&self, j: usize) -> Vec<usize> {
        self.sbp[j]
            .iter()
            .enumerate()
            .filter(|(_, s)| **s < 0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Balance coordinates of a composition, tagged with the id of the basis
/// they were computed in so mixed-basis arithmetic is caught early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceVector {
    pub coords: Vec<f64>,
    pub basis_ref: String,
}

impl BalanceVector {
    pub fn new(coords: Vec<f64>, basis: &ContrastBasis) -> Self {
        Self {
            coords,
            basis_ref: basis.id().to_string(),
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        self.coords.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn check_basis(&self, basis: &ContrastBasis) -> Result<(), CodaError> {
        if self.basis_ref != basis.id() {
            return Err(CodaError::BasisMismatch {
                balance: self.basis_ref.clone(),
                basis: basis.id().to_string(),
            });
        }
        Ok(())
    }
}

/// Builds an orthonormal contrast basis from a sequential binary partition.
///
/// `signs` has `D - 1` rows of length `D` with entries in `{-1, 0, +1}`; row
/// `j` splits one block of parts into a numerator (+1) and denominator (-1)
/// side. Rows may appear in any order, but taken together they must form a
/// full hierarchy: each row must split exactly one block produced by the rows
/// with larger support, starting from the block of all parts. `names` labels
/// the resulting balances in row order.
pub fn sbp_to_basis(signs: &[Vec<i8>], names: &[String]) -> Result<ContrastBasis, CodaError> {
    let d = match signs.first() {
        Some(row) => row.len(),
        None => return Err(CodaError::InvalidPartition("no rows".into())),
    };
    if d < 2 {
        return Err(CodaError::InvalidPartition(format!(
            "rows must cover at least two parts, got {d}"
        )));
    }
    if signs.len() != d - 1 {
        return Err(CodaError::InvalidPartition(format!(
            "expected {} rows for {} parts, got {}",
            d - 1,
            d,
            signs.len()
        )));
    }
    if names.len() != signs.len() {
        return Err(CodaError::InvalidPartition(format!(
            "expected {} balance names, got {}",
            signs.len(),
            names.len()
        )));
    }
    {
        let mut seen = BTreeSet::new();
        for name in names {
            if !seen.insert(name.as_str()) {
                return Err(CodaError::InvalidPartition(format!(
                    "duplicate balance name {name:?}"
                )));
            }
        }
    }
    for (j, row) in signs.iter().enumerate() {
        if row.len() != d {
            return Err(CodaError::InvalidPartition(format!(
                "row {j} has length {}, expected {d}",
                row.len()
            )));
        }
        if row.iter().any(|s| !matches!(s, -1..=1)) {
            return Err(CodaError::InvalidPartition(format!(
                "row {j} has entries outside {{-1, 0, +1}}"
            )));
        }
        let pos = row.iter().filter(|s| **s > 0).count();
        let neg = row.iter().filter(|s| **s < 0).count();
        if pos == 0 || neg == 0 {
            return Err(CodaError::InvalidPartition(format!(
                "row {j} must have at least one +1 and one -1"
            )));
        }
    }

    // Hierarchy check. Process rows by decreasing support size; each row must
    // split one currently active block exactly, leaving the two sides as the
    // new active blocks. Ordering by support is sound because a row can only
    // split a block created by rows with strictly larger support.
    let mut order: Vec<usize> = (0..signs.len()).collect();
    order.sort_by_key(|&j| std::cmp::Reverse(signs[j].iter().filter(|s| **s != 0).count()));
    let mut blocks: Vec<BTreeSet<usize>> = vec![(0..d).collect()];
    for &j in &order {
        let support: BTreeSet<usize> = signs[j]
            .iter()
            .enumerate()
            .filter(|(_, s)| **s != 0)
            .map(|(i, _)| i)
            .collect();
        let Some(pos_in_blocks) = blocks.iter().position(|b| *b == support) else {
            return Err(CodaError::InvalidPartition(format!(
                "row {j} does not split a block of the partition hierarchy \
                 (its support is not a current block)"
            )));
        };
        blocks.swap_remove(pos_in_blocks);
        let plus: BTreeSet<usize> = signs[j]
            .iter()
            .enumerate()
            .filter(|(_, s)| **s > 0)
            .map(|(i, _)| i)
            .collect();
        let minus: BTreeSet<usize> = signs[j]
            .iter()
            .enumerate()
            .filter(|(_, s)| **s < 0)
            .map(|(i, _)| i)
            .collect();
        if plus.len() > 1 {
            blocks.push(plus);
        }
        if minus.len() > 1 {
            blocks.push(minus);
        }
    }
    if !blocks.is_empty() {
        return Err(CodaError::InvalidPartition(
            "rows do not form a complete hierarchy".into(),
        ));
    }

    let mut contrast = Vec::with_capacity(signs.len());
    for row in signs {
        let r = row.iter().filter(|s| **s > 0).count() as f64;
        let s = row.iter().filter(|s| **s < 0).count() as f64;
        let plus_w = (s / (r * (r + s))).sqrt();
        let minus_w = -(r / (s * (r + s))).sqrt();
        contrast.push(
            row.iter()
                .map(|&sign| match sign {
                    1 => plus_w,
                    -1 => minus_w,
                    _ => 0.0,
                })
                .collect::<Vec<f64>>(),
        );
    }
    debug_assert!(contrast_is_orthonormal(&contrast, 1e-12));

    Ok(ContrastBasis {
        id: basis_id(signs, names),
        sbp: signs.to_vec(),
        names: names.to_vec(),
        contrast,
    })
}

/// The default basis for `d` parts: balance `j` contrasts part `j` against
/// all later parts. Balances are named `b0, b1, ...`.
pub fn pivot_basis(d: usize) -> Result<ContrastBasis, CodaError> {
    if d < 2 {
        return Err(CodaError::InvalidPartition(format!(
            "need at least two parts, got {d}"
        )));
    }
    let mut signs = Vec::with_capacity(d - 1);
    for j in 0..d - 1 {
        let mut row = vec![0i8; d];
        row[j] = 1;
        for cell in row.iter_mut().skip(j + 1) {
            *cell = -1;
        }
        signs.push(row);
    }
    let names: Vec<String> = (0..d - 1).map(|j| format!("b{j}")).collect();
    sbp_to_basis(&signs, &names)
}

fn contrast_is_orthonormal(rows: &[Vec<f64>], tol: f64) -> bool {
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate() {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            if (dot - expect).abs() > tol {
                return false;
            }
        }
        if a.iter().sum::<f64>().abs() > tol {
            return false;
        }
    }
    true
}

/// FNV-1a over the partition signs and names; stable across runs and
/// platforms, so serialized balance vectors remain checkable.
fn basis_id(signs: &[Vec<i8>], names: &[String]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |byte: u8| {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for row in signs {
        for &s in row {
            eat(s as u8);
        }
        eat(0xfe);
    }
    for name in names {
        for b in name.bytes() {
            eat(b);
        }
        eat(0xff);
    }
    format!("sbp-{hash:016x}")
}

/// Centered log-ratio: log of each part minus the mean log. Sums to zero.
pub fn clr(x: &Composition) -> Vec<f64> {
    let logs: Vec<f64> = x.values.iter().map(|v| v.max(VALUE_FLOOR).ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    logs.iter().map(|l| l - mean).collect()
}

/// Isometric log-ratio coordinates of `x` in the given basis.
pub fn ilr(x: &Composition, basis: &ContrastBasis) -> Result<BalanceVector, CodaError> {
    if x.len() != basis.parts() {
        return Err(CodaError::DimensionMismatch {
            expected: basis.parts(),
            got: x.len(),
        });
    }
    let logs: Vec<f64> = x.values.iter().map(|v| v.max(VALUE_FLOOR).ln()).collect();
    let coords = basis
        .contrast()
        .iter()
        .map(|row| row.iter().zip(&logs).map(|(c, l)| c * l).sum())
        .collect();
    Ok(BalanceVector::new(coords, basis))
}

/// Maps balance coordinates back to a composition over the given part ids.
/// The balance vector must have been produced in (or for) `basis`.
pub fn ilr_inv(
    z: &BalanceVector,
    basis: &ContrastBasis,
    ids: &[String],
) -> Result<Composition, CodaError> {
    z.check_basis(basis)?;
    if z.dim() != basis.dim() {
        return Err(CodaError::DimensionMismatch {
            expected: basis.dim(),
            got: z.dim(),
        });
    }
    if ids.len() != basis.parts() {
        return Err(CodaError::DimensionMismatch {
            expected: basis.parts(),
            got: ids.len(),
        });
    }
    if z.coords.iter().any(|c| !c.is_finite()) {
        return Err(CodaError::NonFinite("balance coordinates".into()));
    }
    let d = basis.parts();
    let mut logs = vec![0.0; d];
    for (row, &c) in basis.contrast().iter().zip(&z.coords) {
        for (l, w) in logs.iter_mut().zip(row) {
            *l += c * w;
        }
    }
    let values = close_logs(&logs);
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(CodaError::DuplicatePart(id.clone()));
        }
    }
    Ok(Composition {
        ids: ids.to_vec(),
        values,
    })
}

/// Coordinates of `z` (expressed in `from`) in the basis `to` over the same
/// parts: applies the rotation `to · fromᵀ`.
pub fn change_basis(
    z: &BalanceVector,
    from: &ContrastBasis,
    to: &ContrastBasis,
) -> Result<BalanceVector, CodaError> {
    z.check_basis(from)?;
    if from.parts() != to.parts() {
        return Err(CodaError::DimensionMismatch {
            expected: from.parts(),
            got: to.parts(),
        });
    }
    // clr vector from `from` coordinates, then project onto `to` rows.
    let d = from.parts();
    let mut clr_vec = vec![0.0; d];
    for (row, &c) in from.contrast().iter().zip(&z.coords) {
        for (acc, w) in clr_vec.iter_mut().zip(row) {
            *acc += c * w;
        }
    }
    let coords = to
        .contrast()
        .iter()
        .map(|row| row.iter().zip(&clr_vec).map(|(w, v)| w * v).sum())
        .collect();
    Ok(BalanceVector::new(coords, to))
}

/// Aitchison distance: the Euclidean norm of the difference of ilr
/// coordinates. Independent of the (orthonormal) basis chosen.
pub fn aitchison_distance(
    x: &Composition,
    y: &Composition,
    basis: &ContrastBasis,
) -> Result<f64, CodaError> {
    x.check_aligned(y)?;
    let zx = ilr(x, basis)?;
    let zy = ilr(y, basis)?;
    let sq: f64 = zx
        .coords
        .iter()
        .zip(&zy.coords)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq.sqrt())
}

/// Replaces zero parts with small positive shares so the log-ratio machinery
/// applies, using multiplicative replacement: each zero part `i` becomes the
/// share `delta(i)`, and positive parts are scaled by one minus the total
/// replaced share so the overall total is preserved. Inputs with no zeros are
/// returned unchanged.
///
/// `delta(i)` is interpreted as a share of the total and must be positive and
/// strictly below the smallest positive share present.
pub fn zero_replace(
    parts: &[(String, f64)],
    delta: impl Fn(&str) -> f64,
) -> Result<Vec<(String, f64)>, CodaError> {
    for (id, v) in parts {
        if !v.is_finite() {
            return Err(CodaError::NonFinite(format!("part {id:?}")));
        }
        if *v < 0.0 {
            return Err(CodaError::NegativePart {
                part: id.clone(),
                value: *v,
            });
        }
    }
    let total: f64 = parts.iter().map(|(_, v)| v).sum();
    if total <= 0.0 {
        return Err(CodaError::AllZero);
    }
    if parts.iter().all(|(_, v)| *v > 0.0) {
        return Ok(parts.to_vec());
    }
    let min_share = parts
        .iter()
        .filter(|(_, v)| *v > 0.0)
        .map(|(_, v)| v / total)
        .fold(f64::INFINITY, f64::min);
    let mut replaced = 0.0;
    let mut deltas = Vec::with_capacity(parts.len());
    for (id, v) in parts {
        if *v == 0.0 {
            let d = delta(id);
            if !d.is_finite() || d <= 0.0 {
                return Err(CodaError::BadReplacement {
                    part: id.clone(),
                    delta: d,
                });
            }
            if d >= min_share {
                return Err(CodaError::ReplacementTooLarge {
                    part: id.clone(),
                    delta: d,
                    min_share,
                });
            }
            replaced += d;
            deltas.push(Some(d));
        } else {
            deltas.push(None);
        }
    }
    if replaced >= 1.0 {
        // Cannot happen when every delta is below the minimum positive share,
        // but the invariant is cheap to restate for clarity.
        return Err(CodaError::ReplacementTooLarge {
            part: "<all>".into(),
            delta: replaced,
            min_share: 1.0,
        });
    }
    Ok(parts
        .iter()
        .zip(&deltas)
        .map(|((id, v), d)| match d {
            Some(d) => (id.clone(), d * total),
            None => (id.clone(), v * (1.0 - replaced)),
        })
        .collect())
}
