//! Drift observability for systems whose state is a vector of shares.
//!
//! Many operational quantities — traffic mix, budget allocation, where
//! engineering time goes — are compositions: non-negative parts that sum to
//! one. Euclidean arithmetic on raw shares misreads such data, so this crate
//! works in the Aitchison geometry of the simplex instead. It provides:
//!
//! - [`coda`]: compositions, perturbation/powering, isometric log-ratio (ilr)
//!   coordinates built from sequential binary partitions, and the Aitchison
//!   distance;
//! - [`lineage`]: a mapping from volatile leaf part ids onto a small set of
//!   stable groups, kept consistent across renames, splits, and merges;
//! - [`drift`]: robust smoothed estimates of the per-step displacement in
//!   balance coordinates, with energy and attribution summaries;
//! - [`boundary`]: log-contrast constraint sets, barrier diagnostics, and the
//!   analytic step-to-boundary distance along a drift ray;
//! - [`monitor`]: the per-step pipeline combining all of the above into a
//!   `DriftReport`, with health gating, warning levels, and drill-down;
//! - [`synthgen`]: seeded synthetic traces with ground-truth labels;
//! - [`eval`]: detection-delay / false-alarm / attribution metrics, hypothesis
//!   statistics, and the naive baseline detectors used for comparison;
//! - [`stats`]: the small set of order statistics and trend tests shared by
//!   the modules above.

pub mod boundary;
pub mod coda;
pub mod drift;
pub mod eval;
pub mod lineage;
pub mod monitor;
pub mod stats;
pub mod synthgen;
