use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::tabular::TabularDataset;
use crate::error::{Error, Result};

/// Train/valid/test fractions and the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            fractions: [0.6, 0.2, 0.2],
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config("data.split", "fractions must lie in [0, 1]"));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "data.split",
                format!("fractions sum to {sum}, not 1"),
            ));
        }
        Ok(())
    }

    /// Sizes for `n` rows: valid and test are floored, train takes the remainder.
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let floor = |f: f64| (n as f64 * f + 1e-9).floor() as usize;
        let valid = floor(self.fractions[1]);
        let test = floor(self.fractions[2]);
        let train = n.saturating_sub(valid + test);
        if train == 0 || valid == 0 || test == 0 {
            return Err(Error::config(
                "data.split",
                format!("{n} rows give an empty split ({train}/{valid}/{test})"),
            ));
        }
        Ok([train, valid, test])
    }

    /// Seeded Fisher-Yates shuffle (ChaCha8 stream) of `0..n`, then
    /// contiguous slices of the computed sizes.
    pub fn indices(&self, n: usize) -> Result<SplitIndices> {
        if n < 5 {
            return Err(Error::config(
                "data.split",
                format!("need at least 5 rows, got {n}"),
            ));
        }
        let [train, valid, _] = self.sizes(n)?;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let test = idx.split_off(train + valid);
        let valid = idx.split_off(train);
        Ok(SplitIndices {
            train: idx,
            valid,
            test,
        })
    }
}

pub fn split_dataset(
    ds: &TabularDataset,
    spec: &SplitSpec,
) -> Result<(TabularDataset, TabularDataset, TabularDataset)> {
    let s = spec.indices(ds.len())?;
    Ok((ds.select(&s.train), ds.select(&s.valid), ds.select(&s.test)))
}
