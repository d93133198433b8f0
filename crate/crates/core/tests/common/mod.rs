#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use whiteguard_core::{ActivationRecord, Label, LabeledActivationSet};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Haar-ish random orthogonal matrix from the QR of a Gaussian matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    normal_matrix(rng, d, d).qr().q()
}

/// `Q diag(lambda) Q^T` with distinct eigenvalues in `[lo, hi]`, sorted
/// nonincreasing, returned together with `Q` and `lambda`.
pub fn random_spd(
    rng: &mut ChaCha8Rng,
    d: usize,
    lo: f64,
    hi: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let q = random_orthogonal(rng, d);
    let mut lambda: Vec<f64> = (0..d).map(|_| rng.random_range(lo..hi)).collect();
    lambda.sort_by(|a, b| b.total_cmp(a));
    let lambda = DVector::from_vec(lambda);
    let sigma = &q * DMatrix::from_diagonal(&lambda) * q.transpose();
    (((&sigma + sigma.transpose()) * 0.5), q, lambda)
}

/// `n` samples of `N(mean, L L^T)` as row vectors.
pub fn gaussian_samples(
    rng: &mut ChaCha8Rng,
    n: usize,
    mean: &DVector<f64>,
    chol: &DMatrix<f64>,
) -> Vec<Vec<f64>> {
    let d = mean.len();
    (0..n)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
            (mean + chol * z).as_slice().to_vec()
        })
        .collect()
}

/// Exhaustive pairwise Mann-Whitney AUC.
pub fn brute_force_auc(ins: &[f64], outs: &[f64]) -> f64 {
    let mut doubled: u64 = 0;
    for &o in outs {
        for &i in ins {
            if o > i {
                doubled += 2;
            } else if o == i {
                doubled += 1;
            }
        }
    }
    doubled as f64 / (2 * ins.len() as u64 * outs.len() as u64) as f64
}

/// Maximum of TPR - FPR over every threshold that realizes a distinct
/// operating point: below everything, and at each pooled score.
pub fn brute_force_j(ins: &[f64], outs: &[f64]) -> f64 {
    let mut candidates: Vec<f64> = ins.iter().chain(outs).copied().collect();
    candidates.push(f64::NEG_INFINITY);
    let mut best = f64::NEG_INFINITY;
    for &t in &candidates {
        let tpr = outs.iter().filter(|&&s| s > t).count() as f64 / outs.len() as f64;
        let fpr = ins.iter().filter(|&&s| s > t).count() as f64 / ins.len() as f64;
        best = best.max(tpr - fpr);
    }
    best
}

pub fn j_at(ins: &[f64], outs: &[f64], t: f64) -> f64 {
    let tpr = outs.iter().filter(|&&s| s > t).count() as f64 / outs.len() as f64;
    let fpr = ins.iter().filter(|&&s| s > t).count() as f64 / ins.len() as f64;
    tpr - fpr
}

/// Parameters of one synthetic policy category.
pub struct SyntheticCategory {
    pub name: String,
    pub mean: DVector<f64>,
    pub chol: DMatrix<f64>,
    /// Added to out-of-policy samples.
    pub shift: DVector<f64>,
}

impl SyntheticCategory {
    /// In-policy `N(mean, Q diag(lambda) Q^T)`; out-of-policy shifted by
    /// `sigmas * sqrt(lambda_1)` along the top eigenvector.
    pub fn shifted_along_top(
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        mean_scale: f64,
        sigmas: f64,
    ) -> Self {
        let q = random_orthogonal(rng, d);
        let mut lambda: Vec<f64> = (0..d).map(|_| (rng.random_range(-1.0..2.0f64)).exp()).collect();
        lambda.sort_by(|a, b| b.total_cmp(a));
        let sqrt_l = DVector::from_iterator(d, lambda.iter().map(|l| l.sqrt()));
        let chol = &q * DMatrix::from_diagonal(&sqrt_l);
        let mean = DVector::from_fn(d, |_, _| mean_scale * rng.sample::<f64, _>(StandardNormal));
        let shift = q.column(0) * (sigmas * lambda[0].sqrt());
        Self {
            name: name.into(),
            mean,
            chol,
            shift,
        }
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng, out: bool) -> Vec<f64> {
        let d = self.mean.len();
        let z = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
        let mut x = &self.mean + &self.chol * z;
        if out {
            x += &self.shift;
        }
        x.as_slice().to_vec()
    }
}

/// Records with `layers` identical copies of each draw, except that layers
/// other than `signal_layer` carry label-independent noise.
pub fn synthetic_records(
    rng: &mut ChaCha8Rng,
    categories: &[SyntheticCategory],
    per_label: usize,
    layers: usize,
    signal_layer: usize,
    prefix: &str,
) -> Vec<ActivationRecord> {
    let mut records = Vec::new();
    for c in categories {
        for i in 0..(2 * per_label) {
            let out = i % 2 == 1;
            let layer_values = (1..=layers)
                .map(|l| {
                    let x = if l == signal_layer {
                        c.draw(rng, out)
                    } else {
                        c.draw(rng, false)
                    };
                    x.into_iter().map(|v| v as f32).collect()
                })
                .collect();
            records.push(ActivationRecord {
                conversation_id: format!("{prefix}-{}-{i}", c.name),
                category: c.name.clone(),
                label: if out { Label::OutOfPolicy } else { Label::InPolicy },
                layers: layer_values,
            });
        }
    }
    records
}

pub fn set_of(records: Vec<ActivationRecord>, layers: usize, d: usize) -> LabeledActivationSet {
    LabeledActivationSet::new("synthetic", layers, d, records).unwrap()
}
