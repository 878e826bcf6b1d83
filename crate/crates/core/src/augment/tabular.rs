use ndarray::{Array1, ArrayView1};
use rand::Rng;

use crate::data::EmpiricalMarginal;
use crate::error::{Error, Result};

pub fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::param(
            "feature_corrupt.fraction",
            format!("must lie in [0, 1], got {fraction}"),
        ));
    }
    Ok(())
}

/// Number of corrupted columns: `ceil(fraction * F)`.
pub fn corrupt_count(fraction: f64, n_features: usize) -> usize {
    ((fraction * n_features as f64 - 1e-9).ceil().max(0.0) as usize).min(n_features)
}

/// Chooses `ceil(fraction * F)` distinct columns and a replacement value
/// for each, drawn uniformly from that column's training pool.
pub fn sample_corruption(
    fraction: f64,
    marginals: &EmpiricalMarginal,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, f64)>> {
    check_fraction(fraction)?;
    let f = marginals.n_features();
    let k = corrupt_count(fraction, f);
    let columns = rand::seq::index::sample(rng, f, k).into_vec();
    Ok(columns
        .into_iter()
        .map(|c| (c, marginals.sample(c, rng)))
        .collect())
}

pub fn feature_corrupt(
    row: ArrayView1<f64>,
    fraction: f64,
    marginals: &EmpiricalMarginal,
    rng: &mut impl Rng,
) -> Result<Array1<f64>> {
    if row.len() != marginals.n_features() {
        return Err(Error::dim(
            "corrupted row width",
            marginals.n_features(),
            row.len(),
        ));
    }
    let mut out = row.to_owned();
    for (c, v) in sample_corruption(fraction, marginals, rng)? {
        out[c] = v;
    }
    Ok(out)
}
