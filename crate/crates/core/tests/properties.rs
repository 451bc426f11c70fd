//! Property tests for the algebraic contracts: group laws on the simplex,
//! isometry and basis invariance of the balance transform, zero-replacement
//! guarantees, amalgamation consistency, and energy additivity.

use std::collections::BTreeMap;

use driftwatch_core::coda::{
    aitchison_distance, clr, ilr, ilr_inv, perturb, pivot_basis, power, sbp_to_basis, Composition,
};
use driftwatch_core::drift::{attribute, energy};
use driftwatch_core::lineage::{amalgamate, CanonicalGroups, LineageMap};
use proptest::prelude::*;

fn ids(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("p{i}")).collect()
}

fn composition(d: usize) -> impl Strategy<Value = Composition> {
    prop::collection::vec(0.01_f64..100.0, d).prop_map(move |vals| {
        Composition::closure(ids(d).into_iter().zip(vals)).unwrap()
    })
}

/// Pivot partition with its columns permuted: still a valid sequential
/// binary partition, but a genuinely different basis.
fn permuted_basis(d: usize, perm: &[usize]) -> driftwatch_core::coda::ContrastBasis {
    let pivot: Vec<Vec<i8>> = (0..d - 1)
        .map(|r| {
            (0..d)
                .map(|c| {
                    if c == r {
                        1
                    } else if c > r {
                        -1
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect();
    let sbp: Vec<Vec<i8>> = pivot
        .iter()
        .map(|row| perm.iter().map(|&p| row[p]).collect())
        .collect();
    let names: Vec<String> = (0..d - 1).map(|i| format!("perm{i}")).collect();
    sbp_to_basis(&sbp, &names).unwrap()
}

fn dim_and_pair() -> impl Strategy<Value = (usize, Composition, Composition)> {
    (3_usize..=8).prop_flat_map(|d| (Just(d), composition(d), composition(d)))
}

fn dim_and_perm() -> impl Strategy<Value = (usize, Vec<usize>)> {
    (3_usize..=8).prop_flat_map(|d| (Just(d), Just((0..d).collect::<Vec<_>>()).prop_shuffle()))
}

proptest! {
    #[test]
    fn closure_is_scale_invariant((d, x, _) in dim_and_pair(), scale in 0.001_f64..1000.0) {
        let scaled = Composition::closure(
            x.iter().map(|(id, v)| (id.to_string(), v * scale)),
        ).unwrap();
        for ((_, a), (_, b)) in x.iter().zip(scaled.iter()) {
            prop_assert!((a - b).abs() <= 1e-12, "dim {d}: {a} vs {b}");
        }
    }

    #[test]
    fn perturbation_group_laws((d, x, y) in dim_and_pair()) {
        let e = Composition::uniform(ids(d)).unwrap();
        // Identity.
        let xe = perturb(&x, &e).unwrap();
        for ((_, a), (_, b)) in x.iter().zip(xe.iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        // Commutativity.
        let xy = perturb(&x, &y).unwrap();
        let yx = perturb(&y, &x).unwrap();
        for ((_, a), (_, b)) in xy.iter().zip(yx.iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        // Inverse.
        let inv = power(-1.0, &y).unwrap();
        let back = perturb(&xy, &inv).unwrap();
        for ((_, a), (_, b)) in back.iter().zip(x.iter()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn balance_round_trip((d, x, _) in dim_and_pair()) {
        let basis = pivot_basis(d).unwrap();
        let z = ilr(&x, &basis).unwrap();
        let back = ilr_inv(&z, &basis, &ids(d)).unwrap();
        for ((_, a), (_, b)) in x.iter().zip(back.iter()) {
            prop_assert!((a - b).abs() <= 1e-12, "round trip drifted: {a} vs {b}");
        }
    }

    #[test]
    fn balance_transform_is_isometric((d, x, y) in dim_and_pair()) {
        let basis = pivot_basis(d).unwrap();
        let zx = ilr(&x, &basis).unwrap();
        let zy = ilr(&y, &basis).unwrap();
        let coord_dist: f64 = zx
            .coords
            .iter()
            .zip(&zy.coords)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let dist = aitchison_distance(&x, &y, &basis).unwrap();
        prop_assert!((coord_dist - dist).abs() <= 1e-9);
        // And matches the clr-space distance, the basis-free definition.
        let cx = clr(&x);
        let cy = clr(&y);
        let clr_dist: f64 = cx
            .iter()
            .zip(&cy)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        prop_assert!((clr_dist - dist).abs() <= 1e-9);
    }

    #[test]
    fn distance_is_basis_invariant(((d, perm), seed_x, seed_y) in dim_and_perm().prop_flat_map(|(d, perm)| {
        (Just((d, perm)), composition(d), composition(d))
    })) {
        let a = pivot_basis(d).unwrap();
        let b = permuted_basis(d, &perm);
        let za = ilr(&seed_x, &a).unwrap();
        let zb = ilr(&seed_x, &b).unwrap();
        let wa = ilr(&seed_y, &a).unwrap();
        let wb = ilr(&seed_y, &b).unwrap();
        let dist_a: f64 = za.coords.iter().zip(&wa.coords).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        let dist_b: f64 = zb.coords.iter().zip(&wb.coords).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        prop_assert!((dist_a - dist_b).abs() <= 1e-9, "basis changed the metric: {dist_a} vs {dist_b}");
    }

    #[test]
    fn distance_is_perturbation_invariant((d, x, y, p) in (3_usize..=8).prop_flat_map(|d| {
        (Just(d), composition(d), composition(d), composition(d))
    })) {
        let basis = pivot_basis(d).unwrap();
        let base = aitchison_distance(&x, &y, &basis).unwrap();
        let moved = aitchison_distance(
            &perturb(&x, &p).unwrap(),
            &perturb(&y, &p).unwrap(),
            &basis,
        ).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9);
    }

    #[test]
    fn perturbation_is_coordinate_addition((d, x, y) in dim_and_pair(), beta in -3.0_f64..3.0) {
        let basis = pivot_basis(d).unwrap();
        let zx = ilr(&x, &basis).unwrap();
        let zy = ilr(&y, &basis).unwrap();
        let combined = perturb(&x, &power(beta, &y).unwrap()).unwrap();
        let zc = ilr(&combined, &basis).unwrap();
        for ((a, b), c) in zx.coords.iter().zip(&zy.coords).zip(&zc.coords) {
            prop_assert!((a + beta * b - c).abs() <= 1e-9, "additivity broke: {a} + {beta}*{b} vs {c}");
        }
    }

    #[test]
    fn zero_replacement_preserves_positive_ratios(
        vals in prop::collection::vec(0.0_f64..10.0, 4..=8),
        limit in 1e-6_f64..1e-3,
    ) {
        let positives = vals.iter().filter(|v| **v > 0.0).count();
        prop_assume!(positives >= 2);
        let parts: Vec<(String, f64)> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("p{i}"), *v))
            .collect();
        let replaced = driftwatch_core::coda::zero_replace(&parts, |_| 0.65 * limit).unwrap();
        let total_in: f64 = parts.iter().map(|(_, v)| v).sum();
        let total_out: f64 = replaced.iter().map(|(_, v)| v).sum();
        prop_assert!((total_out - total_in).abs() <= 1e-9 * total_in.max(1.0));
        prop_assert!(replaced.iter().all(|(_, v)| *v > 0.0));
        // Ratios between originally positive parts survive.
        let pos: Vec<(f64, f64)> = parts
            .iter()
            .zip(replaced.iter())
            .filter(|((_, orig), _)| *orig > 0.0)
            .map(|((_, orig), (_, repl))| (*orig, *repl))
            .collect();
        for pair in pos.windows(2) {
            let (o1, r1) = pair[0];
            let (o2, r2) = pair[1];
            prop_assert!((o1 / o2 - r1 / r2).abs() <= 1e-9 * (o1 / o2).abs().max(1.0));
        }
    }

    #[test]
    fn amalgamation_commutes_with_scaling(
        vals in prop::collection::vec(0.01_f64..10.0, 6),
        scale in 0.01_f64..100.0,
    ) {
        let groups = CanonicalGroups::new(vec![
            "alpha".into(), "beta".into(), "other".into(),
        ]).unwrap();
        let mut map = LineageMap::new();
        for (i, group) in ["alpha", "alpha", "beta", "beta", "other", "other"]
            .iter()
            .enumerate()
        {
            map.apply_event(&assign(&format!("l{i}"), group), &groups).unwrap();
        }
        let make = |s: f64| {
            Composition::closure(
                vals.iter()
                    .enumerate()
                    .map(|(i, v)| (format!("l{i}"), v * s)),
            )
            .unwrap()
        };
        let one = amalgamate(&make(1.0), &map, &groups, 1e-6).unwrap();
        let scaled = amalgamate(&make(scale), &map, &groups, 1e-6).unwrap();
        for ((_, a), (_, b)) in one.composition.iter().zip(scaled.composition.iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let total: f64 = one.composition.iter().map(|(_, v)| v).sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn renames_do_not_move_group_mass(
        vals in prop::collection::vec(0.01_f64..10.0, 6),
        victim in 0_usize..6,
    ) {
        let groups = CanonicalGroups::new(vec![
            "alpha".into(), "beta".into(), "other".into(),
        ]).unwrap();
        let mut map = LineageMap::new();
        for (i, group) in ["alpha", "alpha", "beta", "beta", "other", "other"]
            .iter()
            .enumerate()
        {
            map.apply_event(&assign(&format!("l{i}"), group), &groups).unwrap();
        }
        let before_comp = Composition::closure(
            vals.iter().enumerate().map(|(i, v)| (format!("l{i}"), *v)),
        ).unwrap();
        let before = amalgamate(&before_comp, &map, &groups, 1e-6).unwrap();

        let mut renamed = map.clone();
        renamed
            .apply_event(
                &driftwatch_core::lineage::LineageEventKind::Rename {
                    part: format!("l{victim}"),
                    new_id: "fresh".into(),
                },
                &groups,
            )
            .unwrap();
        let after_comp = Composition::closure(vals.iter().enumerate().map(|(i, v)| {
            let id = if i == victim { "fresh".to_string() } else { format!("l{i}") };
            (id, *v)
        })).unwrap();
        let after = amalgamate(&after_comp, &renamed, &groups, 1e-6).unwrap();
        for ((_, a), (_, b)) in before.composition.iter().zip(after.composition.iter()) {
            prop_assert!((a - b).abs() <= 1e-12, "rename changed group shares");
        }
    }

    #[test]
    fn energy_accumulates_additively(
        head in prop::collection::vec(prop::collection::vec(-1.0_f64..1.0, 3), 1..20),
        tail in prop::collection::vec(prop::collection::vec(-1.0_f64..1.0, 3), 1..20),
    ) {
        let whole: Vec<Vec<f64>> = head.iter().chain(tail.iter()).cloned().collect();
        let ea = energy(&head).unwrap();
        let eb = energy(&tail).unwrap();
        let ew = energy(&whole).unwrap();
        for i in 0..3 {
            prop_assert!((ea.energy[i] + eb.energy[i] - ew.energy[i]).abs() <= 1e-9);
            for j in 0..3 {
                prop_assert!(
                    (ea.second_moment[i][j] + eb.second_moment[i][j] - ew.second_moment[i][j]).abs()
                        <= 1e-9
                );
            }
        }
        prop_assert_eq!(ew.steps, ea.steps + eb.steps);
    }

    #[test]
    fn attribution_ranks_by_magnitude(diff in prop::collection::vec(-5.0_f64..5.0, 4)) {
        let basis = pivot_basis(5).unwrap();
        let att = attribute(&diff, &basis, 4).unwrap();
        prop_assume!(!att.no_drift);
        for pair in att.entries.windows(2) {
            prop_assert!(pair[0].value.abs() + 1e-15 >= pair[1].value.abs());
        }
        // Every reported value is the actual coordinate at its index.
        for entry in &att.entries {
            prop_assert_eq!(entry.value, diff[entry.index]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn monitor_reports_are_amalgamation_faithful(
        vals in prop::collection::vec(0.05_f64..10.0, 4),
    ) {
        use driftwatch_core::monitor::{MonitorConfig, MonitorState, Observation};

        let groups = CanonicalGroups::new(vec![
            "alpha".into(), "beta".into(), "other".into(),
        ]).unwrap();
        let mut config = MonitorConfig::new(
            groups,
            pivot_basis(3).unwrap(),
            driftwatch_core::boundary::SafeSet::empty(),
        );
        config.health.m_max = 0.999;
        let mut state = MonitorState::new(config).unwrap();
        let mut parts = BTreeMap::new();
        parts.insert("a0".to_string(), vals[0]);
        parts.insert("a1".to_string(), vals[1]);
        parts.insert("b0".to_string(), vals[2]);
        parts.insert("o0".to_string(), vals[3]);
        let events = vec![
            assign("a0", "alpha"),
            assign("a1", "alpha"),
            assign("b0", "beta"),
            assign("o0", "other"),
        ];
        let report = state
            .step(
                &Observation { t: 0, parts, confidence: 1.0, freeze: false },
                &events,
            )
            .unwrap();
        let total: f64 = vals.iter().sum();
        prop_assert!((report.shares["alpha"] - (vals[0] + vals[1]) / total).abs() <= 1e-9);
        prop_assert!((report.shares["beta"] - vals[2] / total).abs() <= 1e-9);
        prop_assert!((report.shares["other"] - vals[3] / total).abs() <= 1e-9);
    }
}

fn assign(part: &str, group: &str) -> driftwatch_core::lineage::LineageEventKind {
    driftwatch_core::lineage::LineageEventKind::Add {
        part: part.to_string(),
        group: Some(group.to_string()),
    }
}
