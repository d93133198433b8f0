//! Synthetic labeled corpus for trying the pipeline without a model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use whiteguard_core::{ActivationRecord, Label, LabeledActivationSet};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct DemoSpec {
    pub categories: Vec<String>,
    pub hidden_dim: usize,
    pub layer_count: usize,
    /// Records per label per category.
    pub per_label: usize,
    /// Out-of-policy shift along each category's top-variance axis, in
    /// standard deviations of that axis.
    pub shift_sigmas: f64,
    /// Seeds the category parameters.
    pub seed: u64,
    /// Seeds the draws, so the same categories can be resampled.
    pub sample_seed: u64,
}

impl Default for DemoSpec {
    fn default() -> Self {
        Self {
            categories: vec!["finance".into(), "healthcare".into()],
            hidden_dim: 32,
            layer_count: 4,
            per_label: 50,
            shift_sigmas: 6.0,
            seed: 0,
            sample_seed: 1,
        }
    }
}

struct Category {
    name: String,
    mean: Vec<f64>,
    sd: Vec<f64>,
    top_axis: usize,
}

/// Layer `signal_layer` carries the shift; the others only carry
/// label-independent noise around the same class mean.
pub fn signal_layer(layer_count: usize) -> usize {
    (3 * layer_count).div_ceil(4).max(1)
}

pub fn generate(spec: &DemoSpec) -> CliResult<LabeledActivationSet> {
    if spec.categories.is_empty() || spec.hidden_dim == 0 || spec.layer_count == 0 {
        return Err(CliError::config("demo needs at least one category, layer and dimension"));
    }
    let d = spec.hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let categories: Vec<Category> = spec
        .categories
        .iter()
        .map(|name| {
            let mut sd: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..1.0f64).exp()).collect();
            sd.shuffle(&mut rng);
            let top_axis = (0..d).max_by(|&a, &b| sd[a].total_cmp(&sd[b])).unwrap_or(0);
            let mean = (0..d)
                .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Category {
                name: name.clone(),
                mean,
                sd,
                top_axis,
            }
        })
        .collect();

    let signal = signal_layer(spec.layer_count);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.sample_seed);
    let mut records = Vec::new();
    for c in &categories {
        for i in 0..2 * spec.per_label {
            let out = i % 2 == 1;
            let layers = (1..=spec.layer_count)
                .map(|layer| {
                    (0..d)
                        .map(|j| {
                            let z: f64 = rng.sample(StandardNormal);
                            let mut v = c.mean[j] + c.sd[j] * z;
                            if out && layer == signal && j == c.top_axis {
                                v += spec.shift_sigmas * c.sd[j];
                            }
                            v as f32
                        })
                        .collect()
                })
                .collect();
            records.push(ActivationRecord {
                conversation_id: format!("{}-{:04}", c.name, i),
                category: c.name.clone(),
                label: if out { Label::OutOfPolicy } else { Label::InPolicy },
                layers,
            });
        }
    }
    Ok(LabeledActivationSet::new("demo-synthetic", spec.layer_count, d, records)?)
}
