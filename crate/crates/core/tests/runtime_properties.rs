mod common;

use std::sync::OnceLock;

use chrono::{TimeZone, Utc};
use nalgebra::DVector;
use proptest::prelude::*;

use common::*;
use whiteguard_core::calibration::split_dataset;
use whiteguard_core::runtime::{score_batch, BatchItem};
use whiteguard_core::stats::{build_whitening_with_floor, fit_statistics_dense};
use whiteguard_core::{
    fit_bundle, score_online, select_class, CalibrationConfig, Decision, GuardBundle,
    LabeledActivationSet, LayerActivations,
};

const D: usize = 8;
const LAYERS: usize = 3;

fn config() -> CalibrationConfig {
    CalibrationConfig {
        k: 5,
        ..CalibrationConfig::default()
    }
}

fn fixture() -> &'static (LabeledActivationSet, GuardBundle) {
    static FIXTURE: OnceLock<(LabeledActivationSet, GuardBundle)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let mut rng = rng(2024);
        let cats: Vec<SyntheticCategory> = ["access", "billing", "refunds"]
            .iter()
            .map(|n| SyntheticCategory::shifted_along_top(&mut rng, n, D, 4.0, 4.0))
            .collect();
        let set = set_of(synthetic_records(&mut rng, &cats, 50, LAYERS, 2, "r"), LAYERS, D);
        let at = Utc.timestamp_opt(1_700_000_000, 0).unwrap();
        let bundle = fit_bundle(&set, &config(), at).unwrap().bundle;
        (set, bundle)
    })
}

fn brute_force_route(bundle: &GuardBundle, x: &LayerActivations) -> String {
    let mut best: Option<(f64, &str)> = None;
    for (name, p) in &bundle.profiles {
        let v = DVector::from_column_slice(&x.0[&p.operational_layer]);
        let m = p.class_mean();
        let cos = v.dot(m) / (v.norm() * m.norm());
        if best.is_none_or(|(b, _)| cos > b) {
            best = Some((cos, name));
        }
    }
    best.unwrap().1.to_string()
}

fn query(values: &[f64]) -> LayerActivations {
    (1..=LAYERS).fold(LayerActivations::new(), |a, l| a.with_layer(l, values.to_vec()))
}

#[test]
fn calibration_samples_reproduce_offline_scores() {
    let (set, bundle) = fixture();
    let cfg = config();
    for (name, profile) in &bundle.profiles {
        let subset = set.category_subset(name);
        let split = split_dataset(&subset, &cfg).unwrap();
        for &i in &split.calib {
            let record = &subset.records[i];
            let x = record.layer_f64(profile.operational_layer).unwrap();
            let offline = profile.transform.score(&x).unwrap();
            let v = score_online(bundle, record, Some(name)).unwrap();
            assert!((v.score - offline).abs() <= 1e-9 * offline.max(1.0));
            assert_eq!(v.decision, Decision::from_score(offline, profile.threshold));
        }
    }
}

#[test]
fn class_mean_routes_to_its_class() {
    let (_, bundle) = fixture();
    for (name, p) in &bundle.profiles {
        let x = query(p.class_mean().as_slice());
        assert_eq!(&select_class(bundle, &x).unwrap().category, name);
    }
}

#[test]
fn six_sigma_shift_is_out_of_policy() {
    let (set, bundle) = fixture();
    let cfg = config();
    for (name, profile) in &bundle.profiles {
        // Independent offline model from the same fitting records, full f64.
        let subset = set.category_subset(name);
        let split = split_dataset(&subset, &cfg).unwrap();
        let samples: Vec<Vec<f64>> = split
            .fit
            .iter()
            .map(|&i| subset.records[i].layer_f64(profile.operational_layer).unwrap())
            .collect();
        let stats = fit_statistics_dense(&samples).unwrap();
        let offline = build_whitening_with_floor(&stats, cfg.k, cfg.eigenvalue_floor).unwrap();

        let shift = stats.eigenvectors.column(0) * (6.0 * stats.eigenvalues[0].sqrt());
        let x: Vec<f64> = (&stats.mean + shift).as_slice().to_vec();
        let expected = offline.score(&x).unwrap();
        assert!((expected - 6.0).abs() < 1e-9);

        let v = score_online(bundle, &query(&x), Some(name)).unwrap();
        assert!((v.score - expected).abs() < 1e-4, "{} vs {}", v.score, expected);
        assert!(expected > profile.threshold);
        assert_eq!(v.decision, Decision::OutOfPolicy);
    }
}

fn strip(v: &whiteguard_core::ComplianceVerdict) -> whiteguard_core::ComplianceVerdict {
    whiteguard_core::ComplianceVerdict {
        latency_micros: 0,
        ..v.clone()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn routing_matches_brute_force_and_ignores_scale(
        raw in prop::collection::vec(-10.0f64..10.0, D),
        c in 1e-3f64..1e3,
    ) {
        let (_, bundle) = fixture();
        prop_assume!(raw.iter().any(|&v| v != 0.0));
        let x = query(&raw);
        let routed = select_class(bundle, &x).unwrap().category.clone();
        prop_assert_eq!(&routed, &brute_force_route(bundle, &x));
        let scaled: Vec<f64> = raw.iter().map(|v| v * c).collect();
        prop_assert_eq!(&select_class(bundle, &query(&scaled)).unwrap().category, &routed);
    }

    #[test]
    fn verdicts_are_stateless(
        items in prop::collection::vec(prop::collection::vec(-20.0f64..20.0, D), 1..20),
        seed in any::<u64>(),
    ) {
        let (_, bundle) = fixture();
        let queries: Vec<LayerActivations> = items.iter().map(|v| query(v)).collect();
        let batch: Vec<BatchItem<'_, LayerActivations>> = queries
            .iter()
            .map(|a| BatchItem { activations: a, category: None })
            .collect();
        let first: Vec<_> = score_batch(bundle, &batch)
            .into_iter()
            .map(|r| r.map(|v| strip(&v)).map_err(|e| e.to_string()))
            .collect();

        // Replay one at a time, in a shuffled order.
        let mut order: Vec<usize> = (0..queries.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng(seed));
        for &i in &order {
            let again = score_online(bundle, &queries[i], None)
                .map(|v| strip(&v))
                .map_err(|e| e.to_string());
            prop_assert_eq!(&again, &first[i]);
        }

        let permuted: Vec<BatchItem<'_, LayerActivations>> = order
            .iter()
            .map(|&i| BatchItem { activations: &queries[i], category: None })
            .collect();
        let out = score_batch(bundle, &permuted);
        for (pos, &i) in order.iter().enumerate() {
            let v = out[pos].as_ref().map(strip).map_err(|e| e.to_string());
            prop_assert_eq!(&v, &first[i]);
        }
    }
}

#[test]
fn identical_items_give_identical_verdicts() {
    let (_, bundle) = fixture();
    let q = query(&[1.0; D]);
    let batch: Vec<_> = (0..8).map(|_| BatchItem { activations: &q, category: None }).collect();
    let out = score_batch(bundle, &batch);
    let first = strip(out[0].as_ref().unwrap());
    assert!(out.iter().all(|v| strip(v.as_ref().unwrap()) == first));
}
