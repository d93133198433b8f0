//! Online scoring against a deployed [`GuardBundle`].
//!
//! A bundle is immutable once loaded; every function here is read-only with
//! respect to it, so one `Arc<GuardBundle>` can serve any number of threads.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ActivationSource;
use crate::error::{Error, Result};
use crate::guard::{GuardBundle, GuardProfile};
use crate::stats::{check_finite, gaussian_log_likelihood};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    InPolicy,
    OutOfPolicy,
}

impl Decision {
    /// Out-of-policy only when the score strictly exceeds the threshold.
    pub fn from_score(score: f64, threshold: f64) -> Self {
        if score > threshold {
            Decision::OutOfPolicy
        } else {
            Decision::InPolicy
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Decision::InPolicy => "in_policy",
            Decision::OutOfPolicy => "out_of_policy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceVerdict {
    pub category: String,
    pub layer: usize,
    pub score: f64,
    pub threshold: f64,
    pub decision: Decision,
    pub log_likelihood: f64,
    pub latency_micros: u64,
}

fn cosine(x: &[f64], mean: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut nm = 0.0;
    for (a, b) in x.iter().zip(mean) {
        dot += a * b;
        nx += a * a;
        nm += b * b;
    }
    if nm == 0.0 {
        return 0.0;
    }
    dot / (nx.sqrt() * nm.sqrt())
}

/// Routes to the category whose class mean has the highest cosine similarity
/// with the activation at that category's own operational layer.
///
/// Ties go to the lexicographically smallest category. A single-profile
/// bundle always routes to its only profile.
pub fn select_class<'b, A: ActivationSource + ?Sized>(
    bundle: &'b GuardBundle,
    activations: &A,
) -> Result<&'b GuardProfile> {
    let mut profiles = bundle.profiles.values();
    let first = profiles
        .next()
        .ok_or_else(|| Error::Routing("bundle has no profiles".into()))?;
    if bundle.profiles.len() == 1 {
        return Ok(first);
    }

    let mut best: Option<(f64, &GuardProfile)> = None;
    let mut missing = None;
    for profile in bundle.profiles.values() {
        let Some(x) = activations.layer(profile.operational_layer) else {
            missing.get_or_insert(profile.operational_layer);
            continue;
        };
        if x.len() != profile.dim() {
            return Err(Error::DimensionMismatch {
                expected: profile.dim(),
                actual: x.len(),
            });
        }
        check_finite(&x)?;
        if x.iter().all(|&v| v == 0.0) {
            return Err(Error::Routing(format!(
                "activation at layer {} is the zero vector",
                profile.operational_layer
            )));
        }
        let sim = cosine(&x, profile.class_mean().as_slice());
        if best.is_none_or(|(b, _)| sim > b) {
            best = Some((sim, profile));
        }
    }
    match (best, missing) {
        (Some((_, p)), _) => Ok(p),
        (None, Some(layer)) => Err(Error::MissingLayer(layer)),
        (None, None) => Err(Error::Routing("no candidate profile".into())),
    }
}

/// Scores `activations` against one profile.
pub fn score_with_profile<A: ActivationSource + ?Sized>(
    profile: &GuardProfile,
    activations: &A,
) -> Result<ComplianceVerdict> {
    let started = Instant::now();
    let layer = profile.operational_layer;
    let x = activations.layer(layer).ok_or(Error::MissingLayer(layer))?;
    check_finite(&x)?;
    let score = profile.transform.score(&x)?;
    Ok(ComplianceVerdict {
        category: profile.category.clone(),
        layer,
        score,
        threshold: profile.threshold,
        decision: Decision::from_score(score, profile.threshold),
        log_likelihood: gaussian_log_likelihood(score, profile.k()),
        latency_micros: started.elapsed().as_micros() as u64,
    })
}

/// Routes (unless `category` pins a profile), scores and decides.
pub fn score_online<A: ActivationSource + ?Sized>(
    bundle: &GuardBundle,
    activations: &A,
    category: Option<&str>,
) -> Result<ComplianceVerdict> {
    let started = Instant::now();
    let profile = match category {
        Some(name) => bundle.profile(name)?,
        None => select_class(bundle, activations)?,
    };
    let mut verdict = score_with_profile(profile, activations)?;
    verdict.latency_micros = started.elapsed().as_micros() as u64;
    Ok(verdict)
}

/// One item of a batch: activations plus an optional pinned category.
pub struct BatchItem<'a, A: ?Sized> {
    pub activations: &'a A,
    pub category: Option<&'a str>,
}

/// Scores each item independently, preserving order. Failures are reported
/// per item and do not abort the batch.
pub fn score_batch<A: ActivationSource + Sync + ?Sized>(
    bundle: &GuardBundle,
    batch: &[BatchItem<'_, A>],
) -> Vec<Result<ComplianceVerdict>> {
    batch
        .par_iter()
        .map(|item| score_online(bundle, item.activations, item.category))
        .collect()
}
