//! ROC-AUC, Youden's J threshold selection and confusion-matrix metrics.
//!
//! Out-of-policy is the positive class throughout, and a score is predicted
//! positive when it is strictly greater than the threshold.

use serde::Serialize;

use crate::error::{Error, Result};

fn sorted_checked(scores: &[f64], side: &str) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyData(format!("no {side} scores")));
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteInput { index });
    }
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Mann-Whitney ROC-AUC: the probability that a random out-of-policy score
/// exceeds a random in-policy score, ties counting one half.
pub fn roc_auc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    let ins = sorted_checked(scores_in, "in-policy")?;
    let outs = sorted_checked(scores_out, "out-of-policy")?;

    // Twice the Mann-Whitney U statistic, kept integral so that ties are exact.
    let mut doubled: u64 = 0;
    let mut below = 0usize;
    let mut upto = 0usize;
    for &o in &outs {
        while below < ins.len() && ins[below] < o {
            below += 1;
        }
        upto = upto.max(below);
        while upto < ins.len() && ins[upto] <= o {
            upto += 1;
        }
        doubled += 2 * below as u64 + (upto - below) as u64;
    }
    let pairs = 2 * ins.len() as u64 * outs.len() as u64;
    Ok(doubled as f64 / pairs as f64)
}

/// Result of maximizing Youden's J over candidate thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdCalibration {
    pub threshold: f64,
    pub j_statistic: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Picks the threshold maximizing `J = TPR - FPR`.
///
/// Candidates are the midpoints between consecutive distinct pooled scores
/// plus `-inf` and `+inf`. Among maximizers the largest threshold wins, so a
/// set with no separation at all returns `+inf` with `J = 0`.
pub fn calibrate_threshold(scores_in: &[f64], scores_out: &[f64]) -> Result<ThresholdCalibration> {
    let ins = sorted_checked(scores_in, "in-policy")?;
    let outs = sorted_checked(scores_out, "out-of-policy")?;
    let (n_in, n_out) = (ins.len() as i64, outs.len() as i64);

    let mut pooled: Vec<f64> = ins.iter().chain(&outs).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();

    let mut candidates = Vec::with_capacity(pooled.len() + 1);
    candidates.push(f64::NEG_INFINITY);
    for w in pooled.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mut mid = a + (b - a) / 2.0;
        if mid >= b {
            mid = a;
        }
        candidates.push(mid);
    }
    candidates.push(f64::INFINITY);

    // J * n_in * n_out = tp * n_in - fp * n_out, compared exactly.
    let mut best: Option<(i64, f64, i64, i64)> = None;
    let (mut in_le, mut out_le) = (0usize, 0usize);
    for &tau in &candidates {
        while in_le < ins.len() && ins[in_le] <= tau {
            in_le += 1;
        }
        while out_le < outs.len() && outs[out_le] <= tau {
            out_le += 1;
        }
        let tp = n_out - out_le as i64;
        let fp = n_in - in_le as i64;
        let scaled = tp * n_in - fp * n_out;
        if best.is_none_or(|(b, ..)| scaled >= b) {
            best = Some((scaled, tau, tp, fp));
        }
    }
    let (scaled, threshold, tp, fp) = best.expect("candidate list is never empty");
    Ok(ThresholdCalibration {
        threshold,
        j_statistic: scaled as f64 / (n_in * n_out) as f64,
        tpr: tp as f64 / n_out as f64,
        fpr: fp as f64 / n_in as f64,
    })
}

/// Confusion counts with out-of-policy as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

impl Confusion {
    /// `pairs` yields `(actually_out_of_policy, predicted_out_of_policy)`.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Self::default();
        for (actual, predicted) in pairs {
            match (actual, predicted) {
                (true, true) => c.true_positive += 1,
                (false, true) => c.false_positive += 1,
                (false, false) => c.true_negative += 1,
                (true, false) => c.false_negative += 1,
            }
        }
        c
    }

    /// Zero when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.true_positive, self.true_positive + self.false_positive)
    }

    /// Zero when there are no actual positives.
    pub fn recall(&self) -> f64 {
        ratio(self.true_positive, self.true_positive + self.false_negative)
    }

    pub fn f1(&self) -> f64 {
        ratio(
            2 * self.true_positive,
            2 * self.true_positive + self.false_positive + self.false_negative,
        )
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
