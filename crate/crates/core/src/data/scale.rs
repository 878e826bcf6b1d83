use serde::{Deserialize, Serialize};

use crate::data::tabular::{FeatureKind, TabularDataset};

/// Per-column standardization fitted on the training split. Categorical
/// columns pass through; constant columns are only centered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    /// Population standard deviation; `None` for untouched columns.
    pub std: Vec<Option<f64>>,
}

impl Scaler {
    pub fn fit(train: &TabularDataset) -> Self {
        let n = train.len() as f64;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for (j, kind) in train.feature_kinds.iter().enumerate() {
            let col = train.features.column(j);
            match kind {
                FeatureKind::Numeric => {
                    let m = col.sum() / n;
                    let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                    mean.push(m);
                    std.push(Some(if var > 0.0 { var.sqrt() } else { 1.0 }));
                }
                FeatureKind::Categorical => {
                    mean.push(0.0);
                    std.push(None);
                }
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, ds: &mut TabularDataset) {
        for (j, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            if let Some(s) = s {
                ds.features.column_mut(j).mapv_inplace(|v| (v - m) / s);
            }
        }
    }
}

/// Fits on `train` and applies the same transform to it and to `others`.
pub fn standardize(train: &mut TabularDataset, others: &mut [&mut TabularDataset]) -> Scaler {
    let scaler = Scaler::fit(train);
    scaler.apply(train);
    for ds in others.iter_mut() {
        scaler.apply(ds);
    }
    scaler
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ds(x: ndarray::Array2<f64>) -> TabularDataset {
        let n = x.nrows();
        let k = vec![FeatureKind::Numeric; x.ncols()];
        TabularDataset::new(x, vec![0; n], k, 1).unwrap()
    }

    #[test]
    fn zero_mean_unit_variance() {
        let mut train = ds(array![[0.0, 5.0], [2.0, 5.0]]);
        let mut valid = ds(array![[4.0, 5.0]]);
        standardize(&mut train, &mut [&mut valid]);
        assert_eq!(train.features, array![[-1.0, 0.0], [1.0, 0.0]]);
        // train mean 1, std 1
        assert_eq!(valid.features, array![[3.0, 0.0]]);
    }

    #[test]
    fn statistics_come_from_train_only() {
        let train = ds(array![[1.0], [3.0], [5.0]]);
        let a = Scaler::fit(&train);
        let mut valid = ds(array![[1000.0]]);
        a.apply(&mut valid);
        let b = Scaler::fit(&train);
        assert_eq!(a, b);
    }

    #[test]
    fn categorical_columns_untouched() {
        let mut train = TabularDataset::new(
            array![[0.0, 2.0], [1.0, 4.0]],
            vec![0, 0],
            vec![FeatureKind::Categorical, FeatureKind::Numeric],
            1,
        )
        .unwrap();
        standardize(&mut train, &mut []);
        assert_eq!(train.features.column(0).to_vec(), vec![0.0, 1.0]);
    }
}
