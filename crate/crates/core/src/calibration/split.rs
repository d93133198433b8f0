//! Seeded, label-stratified fit/calibration splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::CalibrationConfig;
use crate::dataset::{Label, LabeledActivationSet};
use crate::error::{Error, Result};

/// Record indices into the source set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    /// In-policy records from the fitting side.
    pub fit: Vec<usize>,
    /// Every record on the calibration side, both labels.
    pub calib: Vec<usize>,
}

/// Stable 64-bit hash of a category name (FNV-1a), mixed into the seed so a
/// category's split does not depend on which other categories are present.
fn category_seed(seed: u64, category: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in category.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Splits each category of `set` into a fitting side and a calibration side.
///
/// Per category, labeled records are first subsampled to
/// `samples_per_category`, then each label is shuffled and cut at
/// `split_fraction` so that both labels land on the calibration side.
/// Unlabeled records are ignored.
pub fn split_dataset(set: &LabeledActivationSet, config: &CalibrationConfig) -> Result<Split> {
    config.validate()?;
    let mut fit = Vec::new();
    let mut calib = Vec::new();
    for (category, indices) in set.category_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(category_seed(config.seed, category));
        let mut labeled: Vec<usize> = indices
            .into_iter()
            .filter(|&i| set.records[i].label != Label::Unlabeled)
            .collect();
        if labeled.len() > config.samples_per_category {
            labeled.shuffle(&mut rng);
            labeled.truncate(config.samples_per_category);
            labeled.sort_unstable();
        }
        let (mut ins, mut outs): (Vec<usize>, Vec<usize>) = labeled
            .into_iter()
            .partition(|&i| set.records[i].label == Label::InPolicy);

        let fail = |message: String| Error::Calibration {
            category: category.to_string(),
            message,
        };
        if outs.is_empty() {
            return Err(fail("no out-of-policy records for calibration".into()));
        }
        if ins.len() < 3 {
            return Err(fail(format!(
                "need at least 3 in-policy records (2 to fit, 1 to calibrate), got {}",
                ins.len()
            )));
        }

        ins.shuffle(&mut rng);
        outs.shuffle(&mut rng);
        let cut = |n: usize| -> usize {
            let c = (config.split_fraction * n as f64).round() as usize;
            c.min(n - 1)
        };
        let in_cut = cut(ins.len()).max(2);
        let out_cut = cut(outs.len());

        fit.extend_from_slice(&ins[..in_cut]);
        calib.extend_from_slice(&ins[in_cut..]);
        calib.extend_from_slice(&outs[out_cut..]);
    }
    if fit.is_empty() {
        return Err(Error::EmptyData("no labeled records".into()));
    }
    fit.sort_unstable();
    calib.sort_unstable();
    Ok(Split { fit, calib })
}
