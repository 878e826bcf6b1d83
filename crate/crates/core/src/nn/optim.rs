//! Nesterov SGD and AdamW over the model's parameter slots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::ModelState;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdNesterov {
        momentum: f64,
        weight_decay: f64,
    },
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn sgd_nesterov(momentum: f64) -> Self {
        OptimizerKind::SgdNesterov {
            momentum,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One Nesterov step: `v <- mu v + g`, `p <- p - lr (g + mu v)`, with L2
/// weight decay folded into `g`.
pub fn sgd_nesterov_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + wd * *p;
        *v = mu * *v + g;
        *p -= lr * (g + mu * *v);
    }
}

/// One AdamW step at 1-based step count `t`. Weight decay multiplies the
/// weights directly and never enters the moment estimates.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    (beta1, beta2, eps): (f64, f64, f64),
    weight_decay: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let decay = T::of(1.0 - lr * weight_decay);
    let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
    let (bc1, bc2, lr) = (T::of(bc1), T::of(bc2), T::of(lr));
    let one = T::one();
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *p *= decay;
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
}

#[derive(Debug, Clone)]
struct SlotState<T> {
    path: String,
    first: Vec<T>,
    second: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    state: Vec<SlotState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            steps: 0,
            state: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Drops all moment buffers and the step counter.
    pub fn reset(&mut self) {
        self.steps = 0;
        self.state.clear();
    }

    /// Velocity (SGD) or first moment (AdamW) for the parameter at `path`.
    pub fn first_moment(&self, path: &str) -> Option<&[T]> {
        self.state
            .iter()
            .find(|s| s.path == path)
            .map(|s| s.first.as_slice())
    }

    pub fn set_first_moment(&mut self, path: &str, values: Vec<T>) -> Result<()> {
        let slot = self
            .state
            .iter_mut()
            .find(|s| s.path == path)
            .ok_or_else(|| Error::State(format!("no optimizer state for `{path}`")))?;
        if slot.first.len() != values.len() {
            return Err(Error::dim(
                format!("moment buffer `{path}`"),
                slot.first.len(),
                values.len(),
            ));
        }
        slot.first = values;
        Ok(())
    }

    /// Applies one update using the gradients stored in `model`.
    pub fn step(&mut self, model: &mut ModelState<T>) -> Result<()> {
        let slots = model.param_slots();
        if self.state.is_empty() {
            self.state = slots
                .iter()
                .map(|s| SlotState {
                    path: s.path.clone(),
                    first: vec![T::zero(); s.tensor.len()],
                    second: match self.kind {
                        OptimizerKind::AdamW { .. } => vec![T::zero(); s.tensor.len()],
                        OptimizerKind::SgdNesterov { .. } => Vec::new(),
                    },
                })
                .collect();
        }
        if self.state.len() != slots.len() {
            return Err(Error::dim("optimizer slots", self.state.len(), slots.len()));
        }
        for (slot, state) in slots.iter().zip(&self.state) {
            if slot.tensor.len() != state.first.len() || slot.path != state.path {
                return Err(Error::dim(
                    format!("moment buffer `{}`", slot.path),
                    state.first.len(),
                    slot.tensor.len(),
                ));
            }
            if let Some(g) = slot.tensor.grad() {
                if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric {
                        path: slot.path.clone(),
                        message: format!("gradient entry {pos} is {}", g[pos]),
                    });
                }
            }
        }
        self.steps += 1;
        for (slot, state) in slots.into_iter().zip(self.state.iter_mut()) {
            if let Some(keep) = slot.keep {
                for (i, _) in keep.iter().enumerate().filter(|(_, &k)| !k) {
                    state.first[i] = T::zero();
                    if let Some(s) = state.second.get_mut(i) {
                        *s = T::zero();
                    }
                }
            }
            let (values, grad) = slot.tensor.values_and_grad_mut();
            match self.kind {
                OptimizerKind::SgdNesterov {
                    momentum,
                    weight_decay,
                } => sgd_nesterov_step(
                    values,
                    grad,
                    &mut state.first,
                    self.lr,
                    momentum,
                    weight_decay,
                ),
                OptimizerKind::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => adamw_step(
                    values,
                    grad,
                    &mut state.first,
                    &mut state.second,
                    self.steps,
                    self.lr,
                    (beta1, beta2, eps),
                    weight_decay,
                ),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerParams, LayerSpec, NetworkSpec, Tensor};
    use approx::assert_abs_diff_eq;

    #[test]
    fn nesterov_without_momentum_is_sgd() {
        let mut p = [1.0f64, -2.0];
        let mut v = [0.0; 2];
        sgd_nesterov_step(&mut p, &[2.0, 0.5], &mut v, 0.1, 0.0, 0.0);
        assert_abs_diff_eq!(p[0], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], -2.05, epsilon = 1e-15);
    }

    #[test]
    fn nesterov_zero_gradient() {
        let mut p = [1.5f64];
        let mut v = [0.0];
        sgd_nesterov_step(&mut p, &[0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!((p[0], v[0]), (1.5, 0.0));
        // a moving parameter keeps coasting while its velocity decays
        let mut v = [1.0];
        sgd_nesterov_step(&mut p, &[0.0], &mut v, 0.1, 0.9, 0.0);
        assert_abs_diff_eq!(v[0], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn nesterov_two_steps_on_quadratic() {
        // f(p) = p^2 / 2, gradient p
        let mut p = [1.0f64];
        let mut v = [0.0];
        for _ in 0..2 {
            let g = [p[0]];
            sgd_nesterov_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0);
        }
        // step 1: v = 1, p = 1 - 0.1 * (1 + 0.9) = 0.81
        // step 2: v = 0.9 + 0.81 = 1.71, p = 0.81 - 0.1 * (0.81 + 1.539) = 0.5751
        assert_abs_diff_eq!(v[0], 1.71, epsilon = 1e-14);
        assert_abs_diff_eq!(p[0], 0.5751, epsilon = 1e-14);
    }

    #[test]
    fn adamw_single_step() {
        let mut p = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_step(
            &mut p,
            &[0.5],
            &mut m,
            &mut v,
            1,
            0.001,
            (0.9, 0.999, 1e-8),
            0.0,
        );
        // m_hat = 0.5, v_hat = 0.25
        assert_abs_diff_eq!(p[0], 1.0 - 0.001 * 0.5 / (0.5 + 1e-8), epsilon = 1e-15);
        assert_abs_diff_eq!(m[0], 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(v[0], 0.00025, epsilon = 1e-15);
    }

    #[test]
    fn adamw_decay_only_and_bounded_step() {
        let mut p = [2.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_step(
            &mut p,
            &[0.0],
            &mut m,
            &mut v,
            1,
            0.001,
            (0.9, 0.999, 1e-8),
            0.01,
        );
        assert_abs_diff_eq!(p[0], 2.0 * (1.0 - 0.00001), epsilon = 1e-15);
        for g in [1e-12, -1e-9, 1e-3, 50.0] {
            let mut p = [0.3f64];
            let (mut m, mut v) = ([0.0], [0.0]);
            adamw_step(
                &mut p,
                &[g],
                &mut m,
                &mut v,
                1,
                0.001,
                (0.9, 0.999, 1e-8),
                0.0,
            );
            assert!((p[0] - 0.3).abs() <= 0.001 + 1e-15);
        }
    }

    fn tiny_model() -> ModelState<f64> {
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::Linear {
                    in_dim: 2,
                    out_dim: 2,
                },
                LayerSpec::Linear {
                    in_dim: 2,
                    out_dim: 1,
                },
            ],
            1,
            1,
        )
        .unwrap();
        let lin = |o: usize, i: usize, w: Vec<f64>| LayerParams::Linear {
            weight: Tensor::new(vec![o, i], w).unwrap(),
            bias: Tensor::zeros(vec![o]),
        };
        ModelState::from_params(
            spec,
            vec![
                lin(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
                lin(1, 2, vec![1.0, 1.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut model = tiny_model();
        let x = ndarray::array![[1.0, 2.0]];
        model.forward(x.view(), crate::nn::Mode::Train).unwrap();
        model
            .backward(ndarray::array![[f64::NAN]].view(), None)
            .unwrap();
        let mut opt = Optimizer::new(OptimizerKind::sgd_nesterov(0.9), 0.1);
        match opt.step(&mut model) {
            Err(Error::Numeric { path, .. }) => assert!(path.starts_with("layers.")),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn moment_buffers_match_parameter_shapes() {
        let mut model = tiny_model();
        let x = ndarray::array![[1.0, 2.0], [0.5, -1.0]];
        model.forward(x.view(), crate::nn::Mode::Train).unwrap();
        model
            .backward(ndarray::array![[1.0], [0.5]].view(), None)
            .unwrap();
        let mut opt = Optimizer::new(OptimizerKind::adamw(0.01), 0.001);
        opt.step(&mut model).unwrap();
        assert_eq!(opt.first_moment("layers.0.weight").unwrap().len(), 4);
        assert_eq!(opt.first_moment("layers.1.bias").unwrap().len(), 1);
        assert_eq!(opt.steps(), 1);
    }
}
