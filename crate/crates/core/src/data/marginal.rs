use ndarray::Array2;
use rand::Rng;

/// Per-column pools of observed training values.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMarginal {
    pools: Vec<Vec<f64>>,
}

impl EmpiricalMarginal {
    pub fn from_features(train: &Array2<f64>) -> Self {
        Self {
            pools: train.columns().into_iter().map(|c| c.to_vec()).collect(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.pools.len()
    }

    pub fn pool(&self, column: usize) -> &[f64] {
        &self.pools[column]
    }

    /// Uniform draw from the pool of `column`.
    pub fn sample(&self, column: usize, rng: &mut impl Rng) -> f64 {
        let pool = &self.pools[column];
        pool[rng.random_range(0..pool.len())]
    }
}

pub fn empirical_marginals(train: &crate::data::TabularDataset) -> EmpiricalMarginal {
    EmpiricalMarginal::from_features(&train.features)
}
