//! Layer parameters, the model state and its forward/backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::nn::spec::{LayerSpec, NetworkSpec};
use crate::nn::tensor::Tensor;
use crate::prune::PruneMask;
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T> {
    Linear {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    BatchNorm {
        gamma: Option<Tensor<T>>,
        beta: Option<Tensor<T>>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
    },
    Relu,
}

impl<T: Scalar> LayerParams<T> {
    /// Zero weights and biases; batchnorm at scale 1, shift 0, unit running variance.
    pub fn fresh(spec: &LayerSpec) -> Self {
        match *spec {
            LayerSpec::Linear { in_dim, out_dim } => LayerParams::Linear {
                weight: Tensor::zeros(vec![out_dim, in_dim]),
                bias: Tensor::zeros(vec![out_dim]),
            },
            LayerSpec::BatchNorm { dim, affine } => LayerParams::BatchNorm {
                gamma: affine.then(|| Tensor::filled(vec![dim], T::one())),
                beta: affine.then(|| Tensor::zeros(vec![dim])),
                running_mean: vec![T::zero(); dim],
                running_var: vec![T::one(); dim],
            },
            LayerSpec::Relu { .. } => LayerParams::Relu,
        }
    }

    fn matches(&self, spec: &LayerSpec) -> bool {
        match (self, *spec) {
            (LayerParams::Linear { weight, bias }, LayerSpec::Linear { in_dim, out_dim }) => {
                weight.shape() == [out_dim, in_dim] && bias.shape() == [out_dim]
            }
            (
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                },
                LayerSpec::BatchNorm { dim, affine },
            ) => {
                gamma.is_some() == affine
                    && beta.is_some() == affine
                    && gamma.as_ref().is_none_or(|g| g.len() == dim)
                    && beta.as_ref().is_none_or(|b| b.len() == dim)
                    && running_mean.len() == dim
                    && running_var.len() == dim
            }
            (LayerParams::Relu, LayerSpec::Relu { .. }) => true,
            _ => false,
        }
    }

    pub fn detached(&self) -> Self {
        match self {
            LayerParams::Linear { weight, bias } => LayerParams::Linear {
                weight: weight.detached(),
                bias: bias.detached(),
            },
            LayerParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => LayerParams::BatchNorm {
                gamma: gamma.as_ref().map(Tensor::detached),
                beta: beta.as_ref().map(Tensor::detached),
                running_mean: running_mean.clone(),
                running_var: running_var.clone(),
            },
            LayerParams::Relu => LayerParams::Relu,
        }
    }

    pub fn weight(&self) -> Option<&Tensor<T>> {
        match self {
            LayerParams::Linear { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self) -> Option<&mut Tensor<T>> {
        match self {
            LayerParams::Linear { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn reset_running_stats(&mut self) {
        if let LayerParams::BatchNorm {
            running_mean,
            running_var,
            ..
        } = self
        {
            running_mean.iter_mut().for_each(|v| *v = T::zero());
            running_var.iter_mut().for_each(|v| *v = T::one());
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        let cv = |v: &Vec<T>| v.iter().map(|x| U::of(x.as_f64())).collect();
        match self {
            LayerParams::Linear { weight, bias } => LayerParams::Linear {
                weight: weight.cast(),
                bias: bias.cast(),
            },
            LayerParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => LayerParams::BatchNorm {
                gamma: gamma.as_ref().map(Tensor::cast),
                beta: beta.as_ref().map(Tensor::cast),
                running_mean: cv(running_mean),
                running_var: cv(running_var),
            },
            LayerParams::Relu => LayerParams::Relu,
        }
    }
}

/// A trainable parameter together with its pruning mask, if any.
pub struct ParamSlot<'a, T> {
    pub path: String,
    pub tensor: &'a mut Tensor<T>,
    pub keep: Option<&'a [bool]>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Encoder output, one embedding per row.
    pub hidden: Array2<T>,
    pub logits: Array2<T>,
}

#[derive(Debug, Clone)]
enum LayerCache<T> {
    Linear { input: Array2<T> },
    BatchNorm { xhat: Array2<T>, inv_std: Array1<T> },
    Relu { input: Array2<T> },
}

/// Network parameters, the saved initial snapshot and an optional pruning mask.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    spec: NetworkSpec,
    params: Vec<LayerParams<T>>,
    init_snapshot: Option<Vec<LayerParams<T>>>,
    mask: Option<PruneMask>,
    mode: Mode,
    init_scale: f64,
    seeds: Vec<u64>,
    tape: Option<Vec<LayerCache<T>>>,
}

impl<T: Scalar> ModelState<T> {
    /// Wraps `params` and records them as the initial snapshot.
    pub fn from_params(spec: NetworkSpec, params: Vec<LayerParams<T>>) -> Result<Self> {
        check_params(&spec, &params)?;
        let init_snapshot = Some(params.iter().map(LayerParams::detached).collect());
        Ok(Self {
            spec,
            params,
            init_snapshot,
            mask: None,
            mode: Mode::Train,
            init_scale: 1.0,
            seeds: Vec::new(),
            tape: None,
        })
    }

    pub(crate) fn from_parts(
        spec: NetworkSpec,
        params: Vec<LayerParams<T>>,
        init_snapshot: Option<Vec<LayerParams<T>>>,
        mask: Option<PruneMask>,
        init_scale: f64,
        seeds: Vec<u64>,
    ) -> Result<Self> {
        check_params(&spec, &params)?;
        if let Some(snap) = &init_snapshot {
            check_params(&spec, snap)?;
        }
        if let Some(m) = &mask {
            m.check(&spec)?;
        }
        Ok(Self {
            spec,
            params,
            init_snapshot,
            mask,
            mode: Mode::Train,
            init_scale,
            seeds,
            tape: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub fn params_layers_mut(&mut self) -> &mut [LayerParams<T>] {
        self.tape = None;
        &mut self.params
    }

    /// Parameters at initialization, if recorded.
    pub fn init_snapshot(&self) -> Option<&[LayerParams<T>]> {
        self.init_snapshot.as_deref()
    }

    pub fn drop_snapshot(&mut self) {
        self.init_snapshot = None;
    }

    pub fn mask(&self) -> Option<&PruneMask> {
        self.mask.as_ref()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Multiplier applied to the base initialization when this model was created.
    pub fn init_scale(&self) -> f64 {
        self.init_scale
    }

    pub(crate) fn set_init_scale(&mut self, scale: f64) {
        self.init_scale = scale;
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn set_seeds(&mut self, seeds: Vec<u64>) {
        self.seeds = seeds;
    }

    /// Replaces the stored initial snapshot with the current parameters.
    pub fn snapshot_current(&mut self) {
        self.init_snapshot = Some(self.params.iter().map(LayerParams::detached).collect());
    }

    pub fn reset_running_stats(&mut self) {
        self.params
            .iter_mut()
            .for_each(LayerParams::reset_running_stats);
    }

    /// Zeroes every dropped weight and keeps the mask for gradient masking.
    pub fn apply_mask(&mut self, mask: PruneMask) -> Result<()> {
        mask.check(&self.spec)?;
        for (layer, params) in self.params.iter_mut().enumerate() {
            if let (Some(keep), Some(w)) = (mask.keep(layer), params.weight_mut()) {
                for (v, &k) in w.values_mut().iter_mut().zip(keep) {
                    if !k {
                        *v = T::zero();
                    }
                }
            }
        }
        self.mask = Some(mask);
        self.tape = None;
        Ok(())
    }

    pub fn clear_mask(&mut self) {
        self.mask = None;
    }

    /// Trainable tensors in a fixed order with their dotted paths.
    pub fn param_slots(&mut self) -> Vec<ParamSlot<'_, T>> {
        let Self { params, mask, .. } = self;
        let mut out = Vec::new();
        for (i, layer) in params.iter_mut().enumerate() {
            match layer {
                LayerParams::Linear { weight, bias } => {
                    out.push(ParamSlot {
                        path: format!("layers.{i}.weight"),
                        tensor: weight,
                        keep: mask.as_ref().and_then(|m| m.keep(i)),
                    });
                    out.push(ParamSlot {
                        path: format!("layers.{i}.bias"),
                        tensor: bias,
                        keep: None,
                    });
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    if let Some(g) = gamma {
                        out.push(ParamSlot {
                            path: format!("layers.{i}.gamma"),
                            tensor: g,
                            keep: None,
                        });
                    }
                    if let Some(b) = beta {
                        out.push(ParamSlot {
                            path: format!("layers.{i}.beta"),
                            tensor: b,
                            keep: None,
                        });
                    }
                }
                LayerParams::Relu => {}
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for slot in self.param_slots() {
            slot.tensor
                .grad_mut()
                .iter_mut()
                .for_each(|g| *g = T::zero());
        }
    }

    fn check_batch(&self, batch: &ArrayView2<T>) -> Result<()> {
        let (rows, cols) = batch.dim();
        if cols != self.spec.input_dim() {
            return Err(Error::dim(
                "forward input width",
                self.spec.input_dim(),
                cols,
            ));
        }
        if rows == 0 {
            return Err(Error::dim("forward batch size", "at least 1", 0));
        }
        Ok(())
    }

    /// Eval-mode pass using running batchnorm statistics. Does not touch the state.
    pub fn infer(&self, batch: ArrayView2<T>) -> Result<ForwardOutput<T>> {
        self.check_batch(&batch)?;
        let eps = T::of(BN_EPS);
        let mut x = batch.to_owned();
        let mut hidden = None;
        for (i, layer) in self.params.iter().enumerate() {
            if i == self.spec.encoder_end() {
                hidden = Some(x.clone());
            }
            x = match layer {
                LayerParams::Linear { weight, bias } => linear_forward(&x, weight, bias),
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let mean = Array1::from(running_mean.clone());
                    let inv_std =
                        Array1::from_iter(running_var.iter().map(|&v| T::one() / (v + eps).sqrt()));
                    let mut y = (&x - &mean) * &inv_std;
                    affine(&mut y, gamma.as_ref(), beta.as_ref());
                    y
                }
                LayerParams::Relu => x.mapv(relu),
            };
        }
        Ok(ForwardOutput {
            hidden: hidden.expect("encoder_end < layer count"),
            logits: x,
        })
    }

    /// Forward pass. In train mode batchnorm uses batch statistics, updates its
    /// running statistics and the activations are recorded for [`Self::backward`].
    pub fn forward(&mut self, batch: ArrayView2<T>, mode: Mode) -> Result<ForwardOutput<T>> {
        self.mode = mode;
        if mode == Mode::Eval {
            self.tape = None;
            return self.infer(batch);
        }
        self.check_batch(&batch)?;
        let rows = batch.nrows();
        if rows < 2 && self.spec.has_batchnorm() {
            return Err(Error::dim(
                "train-mode batchnorm batch size (unbiased variance needs two samples)",
                "at least 2",
                rows,
            ));
        }
        let eps = T::of(BN_EPS);
        let momentum = T::of(BN_MOMENTUM);
        let n = T::of(rows as f64);
        let unbias = n / (n - T::one());
        let encoder_end = self.spec.encoder_end();
        let mut tape = Vec::with_capacity(self.params.len());
        let mut x = batch.to_owned();
        let mut hidden = None;
        for (i, layer) in self.params.iter_mut().enumerate() {
            if i == encoder_end {
                hidden = Some(x.clone());
            }
            x = match layer {
                LayerParams::Linear { weight, bias } => {
                    let y = linear_forward(&x, weight, bias);
                    tape.push(LayerCache::Linear { input: x });
                    y
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let mean = x.mean_axis(Axis(0)).expect("rows >= 2");
                    let centered = &x - &mean;
                    let var = centered
                        .mapv(|v| v * v)
                        .mean_axis(Axis(0))
                        .expect("rows >= 2");
                    let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
                    let xhat = centered * &inv_std;
                    for ((rm, rv), (&m, &v)) in running_mean
                        .iter_mut()
                        .zip(running_var.iter_mut())
                        .zip(mean.iter().zip(var.iter()))
                    {
                        *rm = (T::one() - momentum) * *rm + momentum * m;
                        *rv = (T::one() - momentum) * *rv + momentum * v * unbias;
                    }
                    let mut y = xhat.clone();
                    affine(&mut y, gamma.as_ref(), beta.as_ref());
                    tape.push(LayerCache::BatchNorm { xhat, inv_std });
                    y
                }
                LayerParams::Relu => {
                    let y = x.mapv(relu);
                    tape.push(LayerCache::Relu { input: x });
                    y
                }
            };
        }
        self.tape = Some(tape);
        Ok(ForwardOutput {
            hidden: hidden.expect("encoder_end < layer count"),
            logits: x,
        })
    }

    /// Backpropagates `grad_logits` (and optionally a gradient on the encoder
    /// output) through the last train-mode forward pass, overwriting every
    /// parameter gradient. Dropped weight positions receive gradient 0.
    pub fn backward(
        &mut self,
        grad_logits: ArrayView2<T>,
        grad_hidden: Option<ArrayView2<T>>,
    ) -> Result<()> {
        let tape = self.tape.take().ok_or_else(|| {
            Error::State("backward called without a preceding train-mode forward pass".into())
        })?;
        let rows = match tape.first() {
            Some(LayerCache::Linear { input }) | Some(LayerCache::Relu { input }) => input.nrows(),
            Some(LayerCache::BatchNorm { xhat, .. }) => xhat.nrows(),
            None => 0,
        };
        let classes = self.spec.output_classes();
        if grad_logits.dim() != (rows, classes) {
            return Err(Error::dim(
                "loss gradient",
                format!("({rows}, {classes})"),
                format!("{:?}", grad_logits.dim()),
            ));
        }
        if let Some(gh) = &grad_hidden {
            let expected = (rows, self.spec.hidden_dim());
            if gh.dim() != expected {
                return Err(Error::dim(
                    "hidden gradient",
                    format!("{expected:?}"),
                    format!("{:?}", gh.dim()),
                ));
            }
        }
        let encoder_end = self.spec.encoder_end();
        let Self { params, mask, .. } = self;
        let mut g = grad_logits.to_owned();
        for (i, (layer, cache)) in params.iter_mut().zip(tape).enumerate().rev() {
            if i + 1 == encoder_end {
                if let Some(gh) = &grad_hidden {
                    g += gh;
                }
            }
            g = match (layer, cache) {
                (LayerParams::Linear { weight, bias }, LayerCache::Linear { input }) => {
                    let mut dw = g.t().dot(&input);
                    if let Some(keep) = mask.as_ref().and_then(|m| m.keep(i)) {
                        for (d, &k) in dw.iter_mut().zip(keep) {
                            if !k {
                                *d = T::zero();
                            }
                        }
                    }
                    let db = g.sum_axis(Axis(0));
                    let dx = if i > 0 {
                        g.dot(&weight.view2())
                    } else {
                        Array2::zeros((0, 0))
                    };
                    weight.set_grad(dw.into_raw_vec_and_offset().0)?;
                    bias.set_grad(db.into_raw_vec_and_offset().0)?;
                    dx
                }
                (
                    LayerParams::BatchNorm { gamma, beta, .. },
                    LayerCache::BatchNorm { xhat, inv_std },
                ) => {
                    if let Some(b) = beta {
                        b.set_grad(g.sum_axis(Axis(0)).to_vec())?;
                    }
                    let dxhat = match gamma {
                        Some(gm) => {
                            gm.set_grad((&g * &xhat).sum_axis(Axis(0)).to_vec())?;
                            &g * &gm.view1()
                        }
                        None => g,
                    };
                    let n = T::of(xhat.nrows() as f64);
                    let sum_d = dxhat.sum_axis(Axis(0));
                    let sum_dx = (&dxhat * &xhat).sum_axis(Axis(0));
                    let scale = inv_std.mapv(|s| s / n);
                    ((dxhat * n - &sum_d) - &xhat * &sum_dx) * &scale
                }
                (LayerParams::Relu, LayerCache::Relu { input }) => {
                    Zip::from(&mut g).and(&input).for_each(|d, &x| {
                        if x <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    g
                }
                _ => unreachable!("tape recorded from the same layer stack"),
            };
        }
        Ok(())
    }

    /// Predicted class per row in eval mode.
    pub fn predict(&self, batch: ArrayView2<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.infer(batch)?.logits))
    }

    /// All prunable (encoder linear) weight values, layer by layer.
    pub fn prunable_weights(&self) -> impl Iterator<Item = T> + '_ {
        self.spec.prunable_layers().flat_map(move |i| {
            self.params[i]
                .weight()
                .expect("linear")
                .values()
                .iter()
                .copied()
        })
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            spec: self.spec.clone(),
            params: self.params.iter().map(LayerParams::cast).collect(),
            init_snapshot: self
                .init_snapshot
                .as_ref()
                .map(|s| s.iter().map(LayerParams::cast).collect()),
            mask: self.mask.clone(),
            mode: self.mode,
            init_scale: self.init_scale,
            seeds: self.seeds.clone(),
            tape: None,
        }
    }
}

fn check_params<T: Scalar>(spec: &NetworkSpec, params: &[LayerParams<T>]) -> Result<()> {
    if params.len() != spec.layers().len() {
        return Err(Error::dim(
            "parameter layers",
            spec.layers().len(),
            params.len(),
        ));
    }
    for (i, (p, l)) in params.iter().zip(spec.layers()).enumerate() {
        if !p.matches(l) {
            return Err(Error::dim(
                format!("parameters of layer {i}"),
                format!("{l:?}"),
                "mismatched tensors",
            ));
        }
    }
    Ok(())
}

#[inline]
fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

fn linear_forward<T: Scalar>(x: &Array2<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Array2<T> {
    let mut y = x.dot(&weight.view2().t());
    y += &bias.view1();
    y
}

fn affine<T: Scalar>(y: &mut Array2<T>, gamma: Option<&Tensor<T>>, beta: Option<&Tensor<T>>) {
    if let Some(g) = gamma {
        *y *= &g.view1();
    }
    if let Some(b) = beta {
        *y += &b.view1();
    }
}

/// Index of the largest entry per row; first index wins ties.
pub fn argmax_rows<T: Scalar>(m: &Array2<T>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_mlp, kaiming_init, LayerSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lin(o: usize, i: usize, w: Vec<f64>, b: Vec<f64>) -> LayerParams<f64> {
        LayerParams::Linear {
            weight: Tensor::new(vec![o, i], w).unwrap(),
            bias: Tensor::new(vec![o], b).unwrap(),
        }
    }

    fn two_linear(
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
        relu: bool,
    ) -> ModelState<f64> {
        let (o2, h) = (b2.len(), b1.len());
        let i = w1.len() / h;
        let mut layers = vec![LayerSpec::Linear {
            in_dim: i,
            out_dim: h,
        }];
        let mut params = vec![lin(h, i, w1, b1)];
        if relu {
            layers.push(LayerSpec::Relu { dim: h });
            params.push(LayerParams::Relu);
        }
        layers.push(LayerSpec::Linear {
            in_dim: h,
            out_dim: o2,
        });
        params.push(lin(o2, h, w2, b2));
        let end = layers.len() - 1;
        ModelState::from_params(NetworkSpec::new(layers, end, o2).unwrap(), params).unwrap()
    }

    #[test]
    fn identity_and_zero_networks() {
        let id = two_linear(
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0; 2],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0; 2],
            false,
        );
        let out = id.infer(array![[1.0, 2.0]].view()).unwrap();
        assert_eq!(out.logits, array![[1.0, 2.0]]);
        assert_eq!(out.hidden, array![[1.0, 2.0]]);
        let zero = two_linear(
            vec![0.0; 4],
            vec![0.0; 2],
            vec![0.0; 4],
            vec![0.0; 2],
            false,
        );
        let out = zero.infer(array![[3.0, -7.0], [1e6, 2.0]].view()).unwrap();
        assert!(out.logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_two_layer_net() {
        let m = two_linear(
            vec![1.0, 2.0, 3.0, -1.0],
            vec![0.5, 0.0],
            vec![1.0, -1.0],
            vec![0.1],
            true,
        );
        // hidden pre-activation [1.5, 3.0]; output 1.5 - 3.0 + 0.1
        let out = m.infer(array![[1.0, 0.0]].view()).unwrap();
        assert_abs_diff_eq!(out.logits[[0, 0]], -1.4, epsilon = 1e-15);
        assert_eq!(out.hidden, array![[1.5, 3.0]]);
    }

    #[test]
    fn shape_and_state_errors() {
        let mut m = two_linear(vec![1.0; 4], vec![0.0; 2], vec![1.0; 2], vec![0.0], false);
        assert!(matches!(
            m.infer(array![[1.0, 2.0, 3.0]].view()),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            m.backward(array![[1.0]].view(), None),
            Err(Error::State(_))
        ));
        m.forward(array![[1.0, 2.0]].view(), Mode::Eval).unwrap();
        assert!(matches!(
            m.backward(array![[1.0]].view(), None),
            Err(Error::State(_))
        ));

        let mut bn: ModelState<f64> = kaiming_init(&build_mlp(3, &[4, 4], 2).unwrap(), 0).unwrap();
        assert!(bn
            .forward(array![[1.0, 2.0, 3.0]].view(), Mode::Train)
            .is_err());
        assert!(bn
            .forward(array![[1.0, 2.0, 3.0]].view(), Mode::Eval)
            .is_ok());
    }

    #[test]
    fn squared_error_gradient_is_outer_product() {
        // one linear layer feeding an identity decoder
        let mut m = two_linear(
            vec![0.5, -1.0, 2.0, 0.0],
            vec![0.1, 0.2],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0; 2],
            false,
        );
        let x = array![[2.0, 3.0]];
        let target = array![[1.0, 1.0]];
        let out = m.forward(x.view(), Mode::Train).unwrap();
        let err = &out.logits - &target;
        m.backward(err.view(), None).unwrap();
        let g = m.params()[0].weight().unwrap().grad().unwrap().to_vec();
        // error = W x + b - t = [-1.9, 3.2]
        let e = [0.5 * 2.0 - 3.0 + 0.1 - 1.0, 4.0 + 0.2 - 1.0];
        assert_eq!(g.len(), 4);
        for (k, v) in g.iter().enumerate() {
            assert_abs_diff_eq!(*v, e[k / 2] * x[[0, k % 2]], epsilon = 1e-12);
        }
        m.forward(x.view(), Mode::Train).unwrap();
        m.backward(array![[0.0, 0.0]].view(), None).unwrap();
        for slot in m.param_slots() {
            assert!(slot.tensor.grad().unwrap().iter().all(|&v| v == 0.0));
        }
    }

    /// Linear probe on logits and hidden: `sum(c * logits) + sum(d * hidden)`.
    fn probe(m: &mut ModelState<f64>, x: &Array2<f64>, c: &Array2<f64>, d: &Array2<f64>) -> f64 {
        let out = m.forward(x.view(), Mode::Train).unwrap();
        (&out.logits * c).sum() + (&out.hidden * d).sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..12 {
            let widths: Vec<usize> = (0..1 + trial % 2)
                .map(|_| rng.random_range(2..=6))
                .collect();
            let spec = build_mlp(3, &widths, 3).unwrap();
            let mut m: ModelState<f64> = kaiming_init(&spec, trial as u64).unwrap();
            let x = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
            let c = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
            let d = Array2::from_shape_fn((5, spec.hidden_dim()), |_| rng.random_range(-1.0..1.0));
            probe(&mut m, &x, &c, &d);
            m.backward(c.view(), Some(d.view())).unwrap();
            let analytic: Vec<Vec<f64>> = m
                .param_slots()
                .iter()
                .map(|s| s.tensor.grad().unwrap().to_vec())
                .collect();
            let h = 1e-4;
            for (si, grads) in analytic.iter().enumerate() {
                for (k, &a) in grads.iter().enumerate() {
                    let shift = |delta: f64| {
                        let mut mm = m.clone();
                        mm.param_slots()[si].tensor.values_mut()[k] += delta;
                        probe(&mut mm, &x, &c, &d)
                    };
                    // fourth-order central stencil
                    let fd = (8.0 * (shift(h) - shift(-h)) - (shift(2.0 * h) - shift(-2.0 * h)))
                        / (12.0 * h);
                    let scale = a.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        (a - fd).abs() / scale < 1e-4,
                        "slot {si} coord {k}: {a} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut m: ModelState<f64> = kaiming_init(&build_mlp(3, &[5, 5], 2).unwrap(), 4).unwrap();
        let x = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        m.forward(x.view(), Mode::Train).unwrap();
        let a = m.forward(x.view(), Mode::Eval).unwrap();
        let b = m.forward(x.view(), Mode::Eval).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(m.infer(x.view()).unwrap().logits, a.logits);
    }

    #[test]
    fn batchnorm_running_statistics() {
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::Linear {
                    in_dim: 1,
                    out_dim: 1,
                },
                LayerSpec::BatchNorm {
                    dim: 1,
                    affine: true,
                },
                LayerSpec::Linear {
                    in_dim: 1,
                    out_dim: 1,
                },
            ],
            2,
            1,
        )
        .unwrap();
        let params = vec![
            lin(1, 1, vec![1.0], vec![0.0]),
            LayerParams::fresh(&LayerSpec::BatchNorm {
                dim: 1,
                affine: true,
            }),
            lin(1, 1, vec![1.0], vec![0.0]),
        ];
        let mut m = ModelState::from_params(spec, params).unwrap();
        m.forward(array![[1.0], [3.0]].view(), Mode::Train).unwrap();
        match &m.params()[1] {
            LayerParams::BatchNorm {
                running_mean,
                running_var,
                ..
            } => {
                // mean 2, unbiased variance 2
                assert_abs_diff_eq!(running_mean[0], 0.9 * 0.0 + 0.1 * 2.0, epsilon = 1e-15);
                assert_abs_diff_eq!(running_var[0], 0.9 * 1.0 + 0.1 * 2.0, epsilon = 1e-15);
            }
            _ => unreachable!(),
        }
        let out = m.forward(array![[1.0], [3.0]].view(), Mode::Train).unwrap();
        // biased variance 1 in normalization
        assert_abs_diff_eq!(
            out.logits[[0, 0]],
            -1.0 / (1.0f64 + 1e-5).sqrt(),
            epsilon = 1e-12
        );
    }
}
