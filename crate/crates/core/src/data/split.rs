use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result};
use crate::graph::RegionId;

/// Labeled region ids partitioned into train / validation / test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<RegionId>,
    pub val: Vec<RegionId>,
    pub test: Vec<RegionId>,
}

/// Seeded shuffle of the labeled regions cut into contiguous pieces. Train
/// and validation sizes are `floor(fraction * n)`; test takes the rest.
pub fn split_dataset(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!("fractions must be positive and sum to 1, got {fractions:?}")));
    }
    let mut ids = ds.labeled_regions();
    let n = ids.len();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fractions[0] * n as f64 + 1e-9).floor() as usize;
    let n_val = (fractions[1] * n as f64 + 1e-9).floor() as usize;
    let split = Split {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        if part.is_empty() {
            return Err(DataError::Split(format!("{name} split is empty with {n} labeled regions")));
        }
    }
    Ok(split)
}
