mod common;

use chrono::{TimeZone, Utc};
use proptest::prelude::*;

use common::*;
use whiteguard_core::calibration::{
    calibrate_threshold, fit_guard_detailed, layer_auc_report, roc_auc, split_dataset,
};
use whiteguard_core::{fit_bundle, fit_guard, CalibrationConfig, LabeledActivationSet, WhiteningMode};

/// Scores drawn from a small grid so that ties are frequent.
fn score_list() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![
            (0i32..20).prop_map(|v| v as f64 * 0.5),
            -50.0f64..50.0,
        ],
        1..=200,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn auc_equals_pairwise_count(ins in score_list(), outs in score_list()) {
        prop_assert_eq!(roc_auc(&ins, &outs).unwrap(), brute_force_auc(&ins, &outs));
    }

    #[test]
    fn youden_threshold_attains_sweep_maximum(ins in score_list(), outs in score_list()) {
        let cal = calibrate_threshold(&ins, &outs).unwrap();
        let best = brute_force_j(&ins, &outs);
        prop_assert!((cal.j_statistic - best).abs() <= 1e-12);
        // The reported J is the one the returned threshold actually realizes.
        prop_assert!((j_at(&ins, &outs, cal.threshold) - cal.j_statistic).abs() <= 1e-12);
        prop_assert!((cal.tpr - cal.fpr - cal.j_statistic).abs() <= 1e-12);
    }

    #[test]
    fn auc_is_invariant_to_positive_scaling(ins in score_list(), outs in score_list()) {
        let f = |v: &Vec<f64>| v.iter().map(|s| s * 4.0).collect::<Vec<_>>();
        prop_assert_eq!(roc_auc(&ins, &outs).unwrap(), roc_auc(&f(&ins), &f(&outs)).unwrap());
    }
}

fn single_category_set(seed: u64, d: usize, layers: usize, sigmas: f64) -> LabeledActivationSet {
    let mut rng = rng(seed);
    let cat = SyntheticCategory::shifted_along_top(&mut rng, "billing", d, 2.0, sigmas);
    set_of(synthetic_records(&mut rng, &[cat], 50, layers, 2, "s"), layers, d)
}

fn scaled_layer(set: &LabeledActivationSet, layer: usize, c: f32) -> LabeledActivationSet {
    let mut out = set.clone();
    for r in &mut out.records {
        for v in &mut r.layers[layer - 1] {
            *v *= c;
        }
    }
    out
}

fn small_config() -> CalibrationConfig {
    CalibrationConfig {
        k: 4,
        ..CalibrationConfig::default()
    }
}

#[test]
fn scaling_a_layer_leaves_auc_and_threshold_unchanged() {
    // Whitening absorbs a global scale of the raw space, so the scores and
    // therefore both AUC and tau are invariant. Powers of two keep f32 exact.
    let set = single_category_set(5, 8, 3, 4.0);
    let config = small_config();
    let base = fit_guard_detailed(&set, &config).unwrap();
    for c in [0.25f32, 2.0, 64.0] {
        let scaled = scaled_layer(&set, base.profile.operational_layer, c);
        let g = fit_guard_detailed(&scaled, &config).unwrap();
        assert_eq!(g.profile.operational_layer, base.profile.operational_layer);
        assert_eq!(g.profile.calibration_auc, base.profile.calibration_auc);
        let rel = (g.profile.threshold - base.profile.threshold).abs() / base.profile.threshold;
        assert!(rel < 1e-9, "c = {c}: {} vs {}", g.profile.threshold, base.profile.threshold);
    }
}

#[test]
fn fit_is_deterministic_for_a_seed() {
    let set = single_category_set(9, 6, 3, 4.0);
    let a = fit_guard(&set, &small_config()).unwrap();
    let b = fit_guard(&set, &small_config()).unwrap();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));

    let other = fit_guard(&set, &CalibrationConfig { seed: 1, ..small_config() }).unwrap();
    assert_ne!(a.threshold, other.threshold);
}

#[test]
fn signal_layer_is_selected() {
    let set = single_category_set(13, 6, 4, 6.0);
    let g = fit_guard_detailed(&set, &small_config()).unwrap();
    assert_eq!(g.profile.operational_layer, 2);
    assert_eq!(g.layers.len(), 4);
    let best = g.layers.iter().filter_map(|l| l.auc).fold(0.0, f64::max);
    assert_eq!(best, g.profile.calibration_auc);
    assert!(g.profile.calibration_auc > 0.9);
}

#[test]
fn report_has_one_row_per_layer() {
    let set = single_category_set(21, 5, 3, 4.0);
    let report = layer_auc_report(&set, &small_config()).unwrap();
    assert_eq!(report.iter().map(|l| l.layer).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(report.iter().all(|l| l.auc.is_some()));
}

#[test]
fn calibration_half_never_feeds_the_fit() {
    let set = single_category_set(3, 4, 2, 4.0);
    let split = split_dataset(&set, &small_config()).unwrap();
    for i in &split.fit {
        assert!(!split.calib.contains(i));
    }
}

#[test]
fn per_category_fits_are_independent_of_other_categories() {
    let mut rng = rng(40);
    let a = SyntheticCategory::shifted_along_top(&mut rng, "alpha", 6, 3.0, 4.0);
    let b = SyntheticCategory::shifted_along_top(&mut rng, "beta", 6, 3.0, 4.0);
    let ra = synthetic_records(&mut rng, &[a], 40, 2, 1, "x");
    let rb = synthetic_records(&mut rng, &[b], 40, 2, 1, "x");
    let both = set_of(ra.iter().chain(&rb).cloned().collect(), 2, 6);
    let alone = set_of(ra, 2, 6);
    let at = Utc.timestamp_opt(1_700_000_000, 0).unwrap();
    let joint = fit_bundle(&both, &small_config(), at).unwrap().bundle;
    let single = fit_bundle(&alone, &small_config(), at).unwrap().bundle;
    assert_eq!(joint.profiles["alpha"], single.profiles["alpha"]);
    assert_eq!(joint.profiles.len(), 2);

    let global = fit_bundle(
        &both,
        &CalibrationConfig {
            mode: WhiteningMode::Global,
            ..small_config()
        },
        at,
    )
    .unwrap()
    .bundle;
    assert_eq!(global.profiles.keys().collect::<Vec<_>>(), vec!["global"]);
}
