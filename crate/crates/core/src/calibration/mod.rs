//! Offline fitting: per-layer whitening, layer selection by ROC-AUC and
//! threshold calibration by Youden's J.

mod metrics;
mod split;

use chrono::{DateTime, SubsecRound, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{calibrate_threshold, roc_auc, Confusion, ThresholdCalibration};
pub use split::{split_dataset, Split};

use crate::dataset::{Label, LabeledActivationSet};
use crate::error::{Error, LayerDiagnostic, Result};
use crate::guard::{GuardBundle, GuardProfile, BUNDLE_FORMAT_VERSION, GLOBAL_CATEGORY};
use crate::stats::{self, WhiteningTransform, DEFAULT_EIGENVALUE_FLOOR};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhiteningMode {
    /// One guard per policy category.
    #[default]
    PerCategory,
    /// A single guard fitted on all categories pooled.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Retained whitening components.
    pub k: usize,
    /// Labeled records drawn per category before splitting.
    pub samples_per_category: usize,
    /// Fraction of each label that goes to the fitting side.
    pub split_fraction: f64,
    pub seed: u64,
    /// Eigenvalue floor relative to the top eigenvalue.
    pub eigenvalue_floor: f64,
    pub mode: WhiteningMode,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            k: 15,
            samples_per_category: 100,
            split_fraction: 0.8,
            seed: 0,
            eigenvalue_floor: DEFAULT_EIGENVALUE_FLOOR,
            mode: WhiteningMode::PerCategory,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Configuration("k must be at least 1".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Configuration(format!(
                "split_fraction must be in (0, 1), got {}",
                self.split_fraction
            )));
        }
        if self.samples_per_category < 4 {
            return Err(Error::Configuration(format!(
                "samples_per_category must be at least 4, got {}",
                self.samples_per_category
            )));
        }
        if !(self.eigenvalue_floor > 0.0 && self.eigenvalue_floor < 1.0) {
            return Err(Error::Configuration(format!(
                "eigenvalue_floor must be in (0, 1), got {}",
                self.eigenvalue_floor
            )));
        }
        Ok(())
    }
}

/// Calibration AUC of one layer; `auc` is `None` when the layer could not be
/// fitted and `error` says why.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerAuc {
    pub layer: usize,
    pub auc: Option<f64>,
    pub error: Option<String>,
}

/// A guard together with the per-layer sweep that selected it.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedGuard {
    pub profile: GuardProfile,
    pub layers: Vec<LayerAuc>,
    pub calibration: ThresholdCalibration,
}

struct LayerFit {
    transform: WhiteningTransform,
    auc: f64,
    scores_in: Vec<f64>,
    scores_out: Vec<f64>,
}

fn fit_layer(
    set: &LabeledActivationSet,
    split: &Split,
    layer: usize,
    config: &CalibrationConfig,
) -> Result<LayerFit> {
    let samples: Vec<Vec<f64>> = split
        .fit
        .iter()
        .map(|&i| set.records[i].layer_f64(layer).ok_or(Error::MissingLayer(layer)))
        .collect::<Result<_>>()?;
    let layer_stats = stats::fit_statistics(&samples)?;
    // Calibrate against exactly what the bundle file will hold.
    let transform = stats::build_whitening_with_floor(&layer_stats, config.k, config.eigenvalue_floor)?
        .to_storage_precision();

    let mut scores_in = Vec::new();
    let mut scores_out = Vec::new();
    for &i in &split.calib {
        let record = &set.records[i];
        let x = record.layer_f64(layer).ok_or(Error::MissingLayer(layer))?;
        let s = transform.score(&x)?;
        match record.label {
            Label::InPolicy => scores_in.push(s),
            Label::OutOfPolicy => scores_out.push(s),
            Label::Unlabeled => {}
        }
    }
    let auc = roc_auc(&scores_in, &scores_out)?;
    Ok(LayerFit {
        transform,
        auc,
        scores_in,
        scores_out,
    })
}

/// Fits every layer, returning results in layer order.
fn sweep_layers(
    set: &LabeledActivationSet,
    config: &CalibrationConfig,
) -> Result<Vec<(usize, Result<LayerFit>)>> {
    config.validate()?;
    set.validate()?;
    let split = split_dataset(set, config)?;
    Ok((1..=set.layer_count)
        .into_par_iter()
        .map(|layer| (layer, fit_layer(set, &split, layer, config)))
        .collect())
}

fn single_category(set: &LabeledActivationSet) -> Result<String> {
    let categories = set.category_indices();
    let mut names = categories.keys();
    match (names.next(), names.next()) {
        (Some(name), None) => Ok(name.to_string()),
        (None, _) => Err(Error::EmptyData("no records".into())),
        (Some(_), Some(_)) => Err(Error::Configuration(format!(
            "expected records from a single category, found {}",
            categories.len()
        ))),
    }
}

fn to_report(sweep: &[(usize, Result<LayerFit>)]) -> Vec<LayerAuc> {
    sweep
        .iter()
        .map(|(layer, r)| match r {
            Ok(fit) => LayerAuc {
                layer: *layer,
                auc: Some(fit.auc),
                error: None,
            },
            Err(e) => LayerAuc {
                layer: *layer,
                auc: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

/// Per-layer calibration AUC for one category, one entry per layer.
pub fn layer_auc_report(data: &LabeledActivationSet, config: &CalibrationConfig) -> Result<Vec<LayerAuc>> {
    single_category(data)?;
    Ok(to_report(&sweep_layers(data, config)?))
}

fn select_and_calibrate(
    name: &str,
    data: &LabeledActivationSet,
    config: &CalibrationConfig,
) -> Result<FittedGuard> {
    let sweep = sweep_layers(data, config)?;
    let layers = to_report(&sweep);

    let mut best: Option<(usize, &LayerFit)> = None;
    for (layer, r) in &sweep {
        if let Ok(fit) = r {
            // Strict comparison keeps the lowest layer on ties.
            if best.is_none_or(|(_, b)| fit.auc > b.auc) {
                best = Some((*layer, fit));
            }
        }
    }
    let Some((layer, fit)) = best else {
        return Err(Error::CalibrationFailure {
            category: name.to_string(),
            diagnostics: sweep
                .iter()
                .filter_map(|(layer, r)| {
                    r.as_ref().err().map(|e| LayerDiagnostic {
                        layer: *layer,
                        reason: e.to_string(),
                    })
                })
                .collect(),
        });
    };

    let calibration = calibrate_threshold(&fit.scores_in, &fit.scores_out)?;
    if !calibration.threshold.is_finite() || calibration.j_statistic <= 0.0 {
        return Err(Error::Calibration {
            category: name.to_string(),
            message: format!(
                "no threshold separates in- from out-of-policy scores at layer {layer} (AUC {:.3})",
                fit.auc
            ),
        });
    }
    Ok(FittedGuard {
        profile: GuardProfile {
            category: name.to_string(),
            operational_layer: layer,
            transform: fit.transform.clone(),
            threshold: calibration.threshold,
            calibration_auc: fit.auc,
        },
        layers,
        calibration,
    })
}

/// Fits the guard for one category's records.
pub fn fit_guard(data: &LabeledActivationSet, config: &CalibrationConfig) -> Result<GuardProfile> {
    fit_guard_detailed(data, config).map(|g| g.profile)
}

pub fn fit_guard_detailed(
    data: &LabeledActivationSet,
    config: &CalibrationConfig,
) -> Result<FittedGuard> {
    let name = single_category(data)?;
    select_and_calibrate(&name, data, config)
}

/// Fits a single guard over all categories pooled; samples are still drawn
/// and split per category.
pub fn fit_global_guard(
    data: &LabeledActivationSet,
    config: &CalibrationConfig,
) -> Result<FittedGuard> {
    select_and_calibrate(GLOBAL_CATEGORY, data, config)
}

/// A fitted bundle plus each guard's layer sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleFit {
    pub bundle: GuardBundle,
    pub guards: Vec<FittedGuard>,
}

impl BundleFit {
    /// `(category, layer, auc)` rows ordered by category then layer.
    pub fn layer_report(&self) -> Vec<(String, LayerAuc)> {
        self.guards
            .iter()
            .flat_map(|g| {
                g.layers
                    .iter()
                    .map(move |l| (g.profile.category.clone(), l.clone()))
            })
            .collect()
    }
}

/// Fits every guard for `set` according to `config.mode`.
///
/// `created_at` is truncated to whole seconds so a saved bundle re-saves
/// byte-identically.
pub fn fit_bundle(
    set: &LabeledActivationSet,
    config: &CalibrationConfig,
    created_at: DateTime<Utc>,
) -> Result<BundleFit> {
    config.validate()?;
    set.validate()?;
    let guards = match config.mode {
        WhiteningMode::Global => vec![fit_global_guard(set, config)?],
        WhiteningMode::PerCategory => {
            let categories: Vec<&str> = set.category_indices().into_keys().collect();
            if categories.is_empty() {
                return Err(Error::EmptyData("activation set has no records".into()));
            }
            let results: Vec<Result<FittedGuard>> = categories
                .par_iter()
                .map(|c| fit_guard_detailed(&set.category_subset(c), config))
                .collect();
            results.into_iter().collect::<Result<Vec<_>>>()?
        }
    };
    let bundle = GuardBundle {
        format_version: BUNDLE_FORMAT_VERSION,
        model_id: set.model_id.clone(),
        created_at: created_at.trunc_subsecs(0),
        config: config.clone(),
        layer_count: set.layer_count,
        hidden_dim: set.hidden_dim,
        profiles: guards
            .iter()
            .map(|g| (g.profile.category.clone(), g.profile.clone()))
            .collect(),
    };
    bundle.validate()?;
    Ok(BundleFit { bundle, guards })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ActivationRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Layer 1 is identical noise for both labels; layer 2 shifts
    /// out-of-policy records by `shift` along the first axis.
    fn two_layer_set(seed: u64, n_in: usize, n_out: usize, d: usize, shift: f64) -> LabeledActivationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |offset: f64| -> Vec<f32> {
            (0..d)
                .map(|j| {
                    let z: f64 = rng.sample(StandardNormal);
                    (z + if j == 0 { offset } else { 0.0 }) as f32
                })
                .collect()
        };
        let mut records = Vec::new();
        for i in 0..(n_in + n_out) {
            let out = i >= n_in;
            let noise = draw(0.0);
            let signal = draw(if out { shift } else { 0.0 });
            records.push(ActivationRecord {
                conversation_id: format!("r{i}"),
                category: "cat".into(),
                label: if out { Label::OutOfPolicy } else { Label::InPolicy },
                layers: vec![noise, signal],
            });
        }
        LabeledActivationSet::new("toy", 2, d, records).unwrap()
    }

    fn small_config() -> CalibrationConfig {
        CalibrationConfig {
            k: 4,
            ..CalibrationConfig::default()
        }
    }

    #[test]
    fn picks_the_separating_layer() {
        let set = two_layer_set(1, 60, 40, 6, 12.0);
        let fitted = fit_guard_detailed(&set, &small_config()).unwrap();
        assert_eq!(fitted.profile.operational_layer, 2);
        assert!(fitted.profile.calibration_auc > 0.95);
        assert!(fitted.profile.threshold > 0.0);
        assert_eq!(fitted.layers.len(), 2);
        let max = fitted
            .layers
            .iter()
            .filter_map(|l| l.auc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(max, fitted.profile.calibration_auc);
    }

    #[test]
    fn single_layer_input() {
        let mut set = two_layer_set(2, 30, 30, 5, 10.0);
        set.layer_count = 1;
        for r in &mut set.records {
            r.layers.remove(0);
        }
        let profile = fit_guard(&set, &small_config()).unwrap();
        assert_eq!(profile.operational_layer, 1);
    }

    #[test]
    fn report_matches_fit() {
        let set = two_layer_set(3, 50, 50, 6, 8.0);
        let config = small_config();
        let report = layer_auc_report(&set, &config).unwrap();
        assert_eq!(report.len(), 2);
        assert_eq!(report, layer_auc_report(&set, &config).unwrap());
        let profile = fit_guard(&set, &config).unwrap();
        let max = report.iter().filter_map(|l| l.auc).fold(0.0, f64::max);
        assert_eq!(max, profile.calibration_auc);
    }

    #[test]
    fn fit_is_deterministic() {
        let set = two_layer_set(4, 40, 40, 6, 8.0);
        let a = fit_guard(&set, &small_config()).unwrap();
        let b = fit_guard(&set, &small_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_mixed_categories() {
        let mut set = two_layer_set(5, 20, 20, 4, 8.0);
        set.records[0].category = "other".into();
        assert!(matches!(
            fit_guard(&set, &small_config()),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn all_layers_degenerate() {
        let mut set = two_layer_set(6, 20, 20, 4, 8.0);
        for r in &mut set.records {
            if r.label == Label::InPolicy {
                for l in &mut r.layers {
                    l.iter_mut().for_each(|v| *v = 1.0);
                }
            }
        }
        match fit_guard(&set, &small_config()) {
            Err(Error::CalibrationFailure { category, diagnostics }) => {
                assert_eq!(category, "cat");
                assert_eq!(diagnostics.len(), 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn k_above_rank_is_reported() {
        let set = two_layer_set(7, 10, 10, 20, 8.0);
        // 8 fit samples give rank 7.
        let config = CalibrationConfig { k: 8, ..small_config() };
        let err = fit_guard(&set, &config).unwrap_err();
        assert!(err.to_string().contains("k = 8"), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(CalibrationConfig::default().validate().is_ok());
        for bad in [
            CalibrationConfig { k: 0, ..Default::default() },
            CalibrationConfig { split_fraction: 1.0, ..Default::default() },
            CalibrationConfig { split_fraction: 0.0, ..Default::default() },
            CalibrationConfig { eigenvalue_floor: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn bundle_modes() {
        let mut set = two_layer_set(8, 40, 40, 6, 10.0);
        let other = two_layer_set(9, 40, 40, 6, 10.0);
        set.records.extend(other.records.into_iter().map(|mut r| {
            r.category = "second".into();
            r
        }));
        let created = DateTime::parse_from_rfc3339("2025-01-02T03:04:05.678Z")
            .unwrap()
            .with_timezone(&Utc);
        let fit = fit_bundle(&set, &small_config(), created).unwrap();
        assert_eq!(
            fit.bundle.profiles.keys().collect::<Vec<_>>(),
            vec!["cat", "second"]
        );
        assert_eq!(fit.bundle.created_at.timestamp_subsec_nanos(), 0);
        assert_eq!(fit.layer_report().len(), 4);

        let global = CalibrationConfig {
            mode: WhiteningMode::Global,
            ..small_config()
        };
        let fit = fit_bundle(&set, &global, created).unwrap();
        assert_eq!(fit.bundle.profiles.len(), 1);
        assert!(fit.bundle.profiles.contains_key(GLOBAL_CATEGORY));
    }
}
