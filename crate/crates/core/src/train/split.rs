use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};

/// Record indices of the train, validation and test partitions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed` and cuts it by `fractions` (train, val,
/// test). Train and validation sizes round down; test takes the rest. With
/// three or more records, validation keeps at least one.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if n == 0 {
        return Err(contract_err!("cannot split an empty dataset"));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(config_err!("split fractions {fractions:?} must be in [0, 1] and sum to 1"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_train = (fractions[0] * n as f64 + 1e-9).floor() as usize;
    let mut n_val = (fractions[1] * n as f64 + 1e-9).floor() as usize;
    if n >= 3 && n_val == 0 && fractions[1] > 0.0 {
        n_val = 1;
        if n_train + n_val > n {
            n_train -= 1;
        }
    }
    n_train = n_train.max(1).min(n);
    n_val = n_val.min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split { train: idx, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_records() {
        let s = split(20, [0.75, 0.15, 0.10], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (15, 3, 2));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(split(20, [0.75, 0.15, 0.10], 1).unwrap(), s);
        assert_ne!(split(20, [0.75, 0.15, 0.10], 2).unwrap(), s);
    }

    #[test]
    fn small_sets_keep_a_validation_record() {
        let s = split(4, [0.75, 0.15, 0.10], 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (3, 1, 0));
        let s = split(8, [0.75, 0.15, 0.10], 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 1, 1));
    }

    #[test]
    fn bad_fractions_and_empty_input() {
        assert!(split(10, [0.5, 0.5, 0.5], 0).is_err());
        assert!(split(0, [0.75, 0.15, 0.10], 0).is_err());
    }
}
