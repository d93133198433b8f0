//! Deployable guard parameters.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use nalgebra::DVector;

use crate::calibration::CalibrationConfig;
use crate::error::{Error, Result};
use crate::stats::WhiteningTransform;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// Category name used for the single profile of a globally whitened bundle.
pub const GLOBAL_CATEGORY: &str = "global";

/// One policy class's operational layer, whitening transform and threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct GuardProfile {
    pub category: String,
    /// 1-based.
    pub operational_layer: usize,
    pub transform: WhiteningTransform,
    pub threshold: f64,
    pub calibration_auc: f64,
}

impl GuardProfile {
    /// Raw-space class mean used for routing; this is the transform's mean.
    pub fn class_mean(&self) -> &DVector<f64> {
        &self.transform.mean
    }

    pub fn k(&self) -> usize {
        self.transform.k()
    }

    pub fn dim(&self) -> usize {
        self.transform.dim()
    }
}

/// The unit of deployment: every profile plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct GuardBundle {
    pub format_version: u32,
    pub model_id: String,
    pub created_at: DateTime<Utc>,
    pub config: CalibrationConfig,
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub profiles: BTreeMap<String, GuardProfile>,
}

impl GuardBundle {
    pub fn validate(&self) -> Result<()> {
        if self.profiles.is_empty() {
            return Err(Error::Configuration("bundle has no profiles".into()));
        }
        for (name, p) in &self.profiles {
            let bad = |msg: String| Err(Error::Configuration(format!("profile {name:?}: {msg}")));
            if *name != p.category {
                return bad(format!("keyed under a different category {:?}", p.category));
            }
            if p.operational_layer == 0 || p.operational_layer > self.layer_count {
                return bad(format!(
                    "operational layer {} outside 1..={}",
                    p.operational_layer, self.layer_count
                ));
            }
            if p.dim() != self.hidden_dim || p.transform.matrix.ncols() != self.hidden_dim {
                return bad(format!(
                    "dimension {} does not match bundle hidden size {}",
                    p.dim(),
                    self.hidden_dim
                ));
            }
            if p.k() == 0 {
                return bad("whitening matrix has no rows".into());
            }
            if !(p.threshold.is_finite() && p.threshold > 0.0) {
                return bad(format!("threshold {} must be finite and positive", p.threshold));
            }
            if !(0.0..=1.0).contains(&p.calibration_auc) {
                return bad(format!("calibration AUC {} outside [0, 1]", p.calibration_auc));
            }
        }
        Ok(())
    }

    pub fn profile(&self, category: &str) -> Result<&GuardProfile> {
        self.profiles
            .get(category)
            .ok_or_else(|| Error::UnknownCategory(category.to_string()))
    }
}
