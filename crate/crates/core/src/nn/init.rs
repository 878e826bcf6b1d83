//! Fan-based weight initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::model::{LayerParams, ModelState};
use crate::nn::spec::{LayerSpec, NetworkSpec};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Normal with variance `2 / fan_in`.
    Kaiming,
    /// Uniform on `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    Glorot,
}

/// Draws linear weights layer by layer from one seeded stream. Biases are
/// zero, batchnorm scale 1 and shift 0.
pub fn init_params<T: Scalar>(
    spec: &NetworkSpec,
    scheme: InitScheme,
    seed: u64,
) -> Vec<LayerParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.layers()
        .iter()
        .map(|layer| {
            let mut p = LayerParams::fresh(layer);
            if let (LayerSpec::Linear { in_dim, out_dim }, Some(w)) = (*layer, p.weight_mut()) {
                let fan_in = in_dim as f64;
                let fan_out = out_dim as f64;
                match scheme {
                    InitScheme::Kaiming => {
                        let std = (2.0 / fan_in).sqrt();
                        for v in w.values_mut() {
                            let z: f64 = rng.sample(StandardNormal);
                            *v = T::of(std * z);
                        }
                    }
                    InitScheme::Glorot => {
                        let a = (6.0 / (fan_in + fan_out)).sqrt();
                        for v in w.values_mut() {
                            let u: f64 = rng.random();
                            *v = T::of(a * (2.0 * u - 1.0));
                        }
                    }
                }
            }
            p
        })
        .collect()
}

pub fn kaiming_init<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<ModelState<T>> {
    let mut model =
        ModelState::from_params(spec.clone(), init_params(spec, InitScheme::Kaiming, seed))?;
    model.set_seeds(vec![seed]);
    Ok(model)
}

pub fn glorot_init<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<ModelState<T>> {
    let mut model =
        ModelState::from_params(spec.clone(), init_params(spec, InitScheme::Glorot, seed))?;
    model.set_seeds(vec![seed]);
    Ok(model)
}

/// Convenience for tests: a weight tensor from explicit values.
pub fn tensor2<T: Scalar>(rows: usize, cols: usize, values: &[f64]) -> Tensor<T> {
    Tensor::new(vec![rows, cols], values.iter().map(|&v| T::of(v)).collect()).expect("shape")
}
