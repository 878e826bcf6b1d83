//! Network architecture descriptions and the two supernetwork builders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Weight stored row-major as `out_dim x in_dim`, plus a bias of `out_dim`.
    Linear {
        in_dim: usize,
        out_dim: usize,
    },
    BatchNorm {
        dim: usize,
        affine: bool,
    },
    Relu {
        dim: usize,
    },
}

impl LayerSpec {
    pub fn in_dim(&self) -> usize {
        match *self {
            LayerSpec::Linear { in_dim, .. } => in_dim,
            LayerSpec::BatchNorm { dim, .. } | LayerSpec::Relu { dim } => dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            LayerSpec::Linear { out_dim, .. } => out_dim,
            LayerSpec::BatchNorm { dim, .. } | LayerSpec::Relu { dim } => dim,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, LayerSpec::Linear { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu { .. } => "relu",
        }
    }
}

/// Ordered layer stack split into an encoder `layers[..encoder_end]` and a
/// decoder `layers[encoder_end..]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
    encoder_end: usize,
    output_classes: usize,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, encoder_end: usize, output_classes: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("model.layers", "network has no layers"));
        }
        if encoder_end == 0 || encoder_end >= layers.len() {
            return Err(Error::config(
                "model.encoder_end",
                format!("must lie in 1..{}, got {encoder_end}", layers.len()),
            ));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_dim() == 0 || layer.out_dim() == 0 {
                return Err(Error::config(
                    format!("model.layers[{i}]"),
                    "zero-width layer",
                ));
            }
            if i > 0 && layers[i - 1].out_dim() != layer.in_dim() {
                return Err(Error::config(
                    format!("model.layers[{i}]"),
                    format!(
                        "{} expects input width {}, previous layer produces {}",
                        layer.kind_name(),
                        layer.in_dim(),
                        layers[i - 1].out_dim()
                    ),
                ));
            }
        }
        let last = layers.last().expect("non-empty").out_dim();
        if last != output_classes {
            return Err(Error::config(
                "model.classes",
                format!("final layer width {last} differs from class count {output_classes}"),
            ));
        }
        Ok(Self {
            layers,
            encoder_end,
            output_classes,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn encoder_end(&self) -> usize {
        self.encoder_end
    }

    pub fn output_classes(&self) -> usize {
        self.output_classes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Width of the encoder output embedding.
    pub fn hidden_dim(&self) -> usize {
        self.layers[self.encoder_end - 1].out_dim()
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::BatchNorm { .. }))
    }

    /// Indices of linear layers whose weights may be pruned (encoder only).
    pub fn prunable_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers[..self.encoder_end]
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_linear())
            .map(|(i, _)| i)
    }

    pub fn linear_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_linear())
            .map(|(i, _)| i)
    }

    /// Number of trainable scalars (weights, biases, batchnorm affine terms).
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Linear { in_dim, out_dim } => in_dim * out_dim + out_dim,
                LayerSpec::BatchNorm { dim, affine } => {
                    if affine {
                        2 * dim
                    } else {
                        0
                    }
                }
                LayerSpec::Relu { .. } => 0,
            })
            .sum()
    }

    pub fn prunable_weight_count(&self) -> usize {
        self.prunable_layers()
            .map(|i| match self.layers[i] {
                LayerSpec::Linear { in_dim, out_dim } => in_dim * out_dim,
                _ => 0,
            })
            .sum()
    }

    /// Widths of the linear layers' outputs excluding the classifier.
    pub fn hidden_widths(&self) -> Vec<usize> {
        let linear: Vec<usize> = self.linear_layers().collect();
        linear[..linear.len().saturating_sub(1)]
            .iter()
            .map(|&i| self.layers[i].out_dim())
            .collect()
    }
}

/// Dense MLP: a first linear layer on the raw input, then every following
/// linear layer preceded by batchnorm and ReLU. The decoder is the final
/// classification layer; the encoder output is the last ReLU activation.
pub fn build_mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Result<NetworkSpec> {
    if input_dim == 0 {
        return Err(Error::config("model.input_dim", "must be at least 1"));
    }
    if classes < 2 {
        return Err(Error::config("model.classes", "need at least 2 classes"));
    }
    if hidden.is_empty() {
        return Err(Error::config(
            "model.hidden",
            "need at least one hidden layer",
        ));
    }
    if let Some(i) = hidden.iter().position(|&h| h == 0) {
        return Err(Error::config(
            format!("model.hidden[{i}]"),
            "zero-width layer",
        ));
    }
    let mut layers = vec![LayerSpec::Linear {
        in_dim: input_dim,
        out_dim: hidden[0],
    }];
    let widths = hidden.iter().copied().chain(std::iter::once(classes));
    for (prev, next) in hidden.iter().copied().zip(widths.skip(1)) {
        layers.push(LayerSpec::BatchNorm {
            dim: prev,
            affine: true,
        });
        layers.push(LayerSpec::Relu { dim: prev });
        layers.push(LayerSpec::Linear {
            in_dim: prev,
            out_dim: next,
        });
    }
    let encoder_end = layers.len() - 1;
    NetworkSpec::new(layers, encoder_end, classes)
}

/// Hidden sizes `[a, a/2, a/2, a/4, a/4, a/8, a/8, a/16, 64 alpha]` with
/// `a = alpha * s^2`.
pub fn mlp_vis_widths(alpha: usize, input_pixels: usize) -> Result<Vec<usize>> {
    if alpha == 0 || input_pixels == 0 {
        return Err(Error::config(
            "model.alpha",
            "alpha and image size must be positive",
        ));
    }
    let base = alpha * input_pixels;
    let divisors = [1usize, 2, 2, 4, 4, 8, 8, 16];
    let mut widths = Vec::with_capacity(9);
    for (layer, d) in divisors.iter().enumerate() {
        if !base.is_multiple_of(*d) {
            return Err(Error::config(
                format!("model.hidden[{layer}]"),
                format!("alpha * s^2 = {base} is not divisible by {d}"),
            ));
        }
        widths.push(base / d);
    }
    widths.push(64 * alpha);
    Ok(widths)
}

/// Vision supernetwork over flattened `channels x s x s` images.
pub fn build_mlp_vis(
    alpha: usize,
    input_pixels: usize,
    channels: usize,
    classes: usize,
) -> Result<NetworkSpec> {
    let widths = mlp_vis_widths(alpha, input_pixels)?;
    build_mlp(channels * input_pixels, &widths, classes)
}

pub const MLP_TAB_WIDTH: usize = 512;
pub const MLP_TAB_DEPTH: usize = 9;

/// Tabular supernetwork: nine hidden layers of width 512.
pub fn build_mlp_tab(input_features: usize, classes: usize) -> Result<NetworkSpec> {
    build_mlp(input_features, &[MLP_TAB_WIDTH; MLP_TAB_DEPTH], classes)
}
