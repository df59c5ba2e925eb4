//! Image-level train/validation/test partition.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.64,
            val: 0.16,
            test: 0.20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Smallest dataset [`split_dataset`] accepts.
pub const MIN_IMAGES: usize = 5;

/// Sorts the ids, shuffles them with `spec.seed`, then takes
/// `floor(train · M)` for training, `floor(val · M)` for validation and the
/// rest for testing.
pub fn split_dataset(ids: &[String], spec: &SplitSpec) -> Result<Split> {
    let ratios = [spec.train, spec.val, spec.test];
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let m = ids.len();
    if m < MIN_IMAGES {
        return Err(Error::Data(format!("{m} images; a split needs at least {MIN_IMAGES}")));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Data("duplicate image ids".into()));
    }
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    // the epsilon keeps products like 0.64 * 25 = 15.999... from flooring low
    let n_train = (spec.train * m as f64 + 1e-9).floor() as usize;
    let n_val = ((spec.val * m as f64 + 1e-9).floor() as usize).min(m - n_train);
    let test = sorted.split_off(n_train + n_val);
    let val = sorted.split_off(n_train);
    Ok(Split {
        train: sorted,
        val,
        test,
    })
}
