//! Seeded synthetic classification sets.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::tabular::{FeatureKind, TabularDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Two Gaussian classes whose means differ by `2 * separation` on each
    /// informative feature.
    Gaussian,
    /// Label is the sign of a fixed nonlinear function of the informative
    /// features; the remaining features are independent noise.
    Invariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_samples: usize,
    pub n_features: usize,
    pub n_informative: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Probability of flipping each label after generation.
    #[serde(default)]
    pub label_noise: f64,
    pub seed: u64,
}

fn default_separation() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<TabularDataset> {
        if self.n_informative == 0 || self.n_informative > self.n_features {
            return Err(Error::config(
                "data.synthetic.n_informative",
                format!("must lie in 1..={}", self.n_features),
            ));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::config(
                "data.synthetic.label_noise",
                "must lie in [0, 0.5)",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (n, f, k) = (self.n_samples, self.n_features, self.n_informative);
        let mut x = Array2::<f64>::zeros((n, f));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            for j in 0..f {
                x[[i, j]] = rng.sample(StandardNormal);
            }
            let y = match self.kind {
                SyntheticKind::Gaussian => {
                    let y = rng.random_range(0..2usize);
                    let shift = if y == 1 {
                        self.separation
                    } else {
                        -self.separation
                    };
                    for j in 0..k {
                        x[[i, j]] += shift;
                    }
                    y
                }
                SyntheticKind::Invariance => {
                    let row = x.row(i);
                    usize::from(invariance_score(row.as_slice().expect("contiguous"), k) > 0.0)
                }
            };
            let flip = rng.random::<f64>() < self.label_noise;
            labels.push(if flip { 1 - y } else { y });
        }
        TabularDataset::new(x, labels, vec![FeatureKind::Numeric; f], 2)
    }
}

/// Sum of pairwise products and linear terms over the first `k` features,
/// so no single feature decides the label.
pub fn invariance_score(row: &[f64], k: usize) -> f64 {
    let z = &row[..k];
    let linear: f64 = z.iter().sum::<f64>() / (k as f64).sqrt();
    let pairs: f64 = z.windows(2).map(|w| w[0] * w[1]).sum();
    linear + pairs
}
