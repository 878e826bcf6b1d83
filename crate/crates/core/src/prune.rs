//! Proactive (kappa-scaled) initialization, global one-shot magnitude
//! pruning of the encoder, mask bookkeeping and lottery-ticket reinit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::init::{init_params, InitScheme};
use crate::nn::model::{LayerParams, ModelState};
use crate::nn::spec::{LayerSpec, NetworkSpec};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    pub keep: Vec<bool>,
    /// False for decoder layers, which are never pruned.
    pub prunable: bool,
}

/// Keep/drop flags for every linear weight, indexed by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    layers: Vec<Option<LayerMask>>,
    target_ratio: f64,
}

impl PruneMask {
    pub fn all_ones(spec: &NetworkSpec) -> Self {
        let encoder_end = spec.encoder_end();
        let layers = spec
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| match *l {
                LayerSpec::Linear { in_dim, out_dim } => Some(LayerMask {
                    keep: vec![true; in_dim * out_dim],
                    prunable: i < encoder_end,
                }),
                _ => None,
            })
            .collect();
        Self {
            layers,
            target_ratio: 1.0,
        }
    }

    /// Builds a mask from per-layer flags. Decoder layers must be all-ones.
    pub fn from_layers(
        spec: &NetworkSpec,
        layers: Vec<Option<Vec<bool>>>,
        target_ratio: f64,
    ) -> Result<Self> {
        let encoder_end = spec.encoder_end();
        let layers = layers
            .into_iter()
            .enumerate()
            .map(|(i, keep)| {
                keep.map(|keep| LayerMask {
                    keep,
                    prunable: i < encoder_end,
                })
            })
            .collect();
        let mask = Self {
            layers,
            target_ratio,
        };
        mask.check(spec)?;
        Ok(mask)
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.layers().len() {
            return Err(Error::dim(
                "mask layers",
                spec.layers().len(),
                self.layers.len(),
            ));
        }
        for (i, (m, l)) in self.layers.iter().zip(spec.layers()).enumerate() {
            match (m, *l) {
                (Some(m), LayerSpec::Linear { in_dim, out_dim }) => {
                    if m.keep.len() != in_dim * out_dim {
                        return Err(Error::dim(
                            format!("mask of layer {i}"),
                            in_dim * out_dim,
                            m.keep.len(),
                        ));
                    }
                    if m.prunable != (i < spec.encoder_end()) {
                        return Err(Error::State(format!(
                            "mask layer {i} has wrong prunable flag"
                        )));
                    }
                    if !m.prunable && m.keep.iter().any(|k| !k) {
                        return Err(Error::State(format!("decoder layer {i} may not be pruned")));
                    }
                }
                (None, LayerSpec::Linear { .. }) => {
                    return Err(Error::State(format!("mask missing for linear layer {i}")))
                }
                (Some(_), _) => {
                    return Err(Error::State(format!("mask given for non-linear layer {i}")))
                }
                (None, _) => {}
            }
        }
        Ok(())
    }

    pub fn keep(&self, layer: usize) -> Option<&[bool]> {
        self.layers
            .get(layer)
            .and_then(|m| m.as_ref())
            .map(|m| m.keep.as_slice())
    }

    pub fn layers(&self) -> &[Option<LayerMask>] {
        &self.layers
    }

    pub fn target_ratio(&self) -> f64 {
        self.target_ratio
    }

    pub fn prunable_count(&self) -> usize {
        self.prunable().map(|m| m.keep.len()).sum()
    }

    pub fn kept_count(&self) -> usize {
        self.prunable()
            .map(|m| m.keep.iter().filter(|&&k| k).count())
            .sum()
    }

    /// `prunable / kept`; infinite when nothing is kept.
    pub fn achieved_ratio(&self) -> f64 {
        self.prunable_count() as f64 / self.kept_count() as f64
    }

    fn prunable(&self) -> impl Iterator<Item = &LayerMask> {
        self.layers.iter().flatten().filter(|m| m.prunable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub kappa: f64,
    pub seed: u64,
}

/// Base initialization with every linear weight multiplied by `kappa`.
/// The scaled values become the initial snapshot; batchnorm stays at scale 1, shift 0.
pub fn pis_init<T: Scalar>(spec: &NetworkSpec, init: InitSpec) -> Result<ModelState<T>> {
    if !(init.kappa > 0.0 && init.kappa.is_finite()) {
        return Err(Error::param(
            "kappa",
            format!("must be positive, got {}", init.kappa),
        ));
    }
    let kappa = T::of(init.kappa);
    let mut params = init_params::<T>(spec, init.scheme, init.seed);
    for p in &mut params {
        if let Some(w) = p.weight_mut() {
            w.map_inplace(|v| v * kappa);
        }
    }
    let mut model = ModelState::from_params(spec.clone(), params)?;
    model.set_init_scale(init.kappa);
    model.set_seeds(vec![init.seed]);
    Ok(model)
}

/// Number of weights kept at compression ratio `r`: `floor(count / r)`.
pub fn keep_count(prunable: usize, ratio: f64) -> usize {
    (prunable as f64 / ratio).floor() as usize
}

/// Ranks every encoder linear weight jointly by magnitude and keeps the
/// `floor(count / r)` largest. Ties at the threshold go to the lower
/// `(layer, flat index)`. Decoder weights are always kept.
pub fn global_magnitude_prune<T: Scalar>(model: &ModelState<T>, ratio: f64) -> Result<PruneMask> {
    if !(ratio >= 1.0 && ratio.is_finite()) {
        return Err(Error::param(
            "compression_ratio",
            format!("must be >= 1, got {ratio}"),
        ));
    }
    let spec = model.spec();
    let mut entries: Vec<(T, u32, u32)> = Vec::with_capacity(spec.prunable_weight_count());
    for layer in spec.prunable_layers() {
        let w = model.params()[layer].weight().expect("linear layer");
        entries.extend(
            w.values()
                .iter()
                .enumerate()
                .map(|(j, v)| (v.abs(), layer as u32, j as u32)),
        );
    }
    let total = entries.len();
    let keep = keep_count(total, ratio);
    if keep == 0 {
        return Err(Error::param(
            "compression_ratio",
            format!("ratio {ratio} keeps no weight out of {total} prunable"),
        ));
    }
    let order = |a: &(T, u32, u32), b: &(T, u32, u32)| {
        b.0.partial_cmp(&a.0)
            .unwrap_or_else(|| a.0.is_nan().cmp(&b.0.is_nan()))
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    };
    if keep < total {
        entries.select_nth_unstable_by(keep - 1, order);
    }
    let mut mask = PruneMask::all_ones(spec);
    mask.target_ratio = ratio;
    for m in mask.layers.iter_mut().flatten().filter(|m| m.prunable) {
        m.keep.iter_mut().for_each(|k| *k = false);
    }
    for &(_, layer, j) in &entries[..keep] {
        mask.layers[layer as usize].as_mut().expect("linear").keep[j as usize] = true;
    }
    Ok(mask)
}

/// Subnetwork initialization: `mask * theta0` for weights, every other
/// parameter copied from the snapshot, running statistics reset.
pub fn lottery_reinit<T: Scalar>(mask: &PruneMask, model: &ModelState<T>) -> Result<ModelState<T>> {
    lottery_reinit_rescaled(mask, model, 1.0)
}

/// Like [`lottery_reinit`] with the snapshot's linear weights multiplied by
/// `factor` first (`1 / kappa` recovers the unscaled base initialization).
pub fn lottery_reinit_rescaled<T: Scalar>(
    mask: &PruneMask,
    model: &ModelState<T>,
    factor: f64,
) -> Result<ModelState<T>> {
    let snapshot = model
        .init_snapshot()
        .ok_or_else(|| Error::State("lottery reinit needs the initial snapshot".into()))?;
    mask.check(model.spec())?;
    let factor_t = T::of(factor);
    let params: Vec<LayerParams<T>> = snapshot
        .iter()
        .map(|p| {
            let mut p = p.detached();
            p.reset_running_stats();
            if factor != 1.0 {
                if let Some(w) = p.weight_mut() {
                    w.map_inplace(|v| v * factor_t);
                }
            }
            p
        })
        .collect();
    let mut out = ModelState::from_parts(
        model.spec().clone(),
        params,
        Some(snapshot.iter().map(LayerParams::detached).collect()),
        None,
        model.init_scale(),
        model.seeds().to_vec(),
    )?;
    out.apply_mask(mask.clone())?;
    Ok(out)
}

pub fn apply_mask<T: Scalar>(model: &mut ModelState<T>, mask: PruneMask) -> Result<()> {
    model.apply_mask(mask)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityReport {
    pub prunable_count: usize,
    pub kept_count: usize,
    pub achieved_ratio: f64,
}

pub fn sparsity_report<T: Scalar>(model: &ModelState<T>) -> SparsityReport {
    let prunable = model.spec().prunable_weight_count();
    let kept = match model.mask() {
        Some(m) => m.kept_count(),
        None => prunable,
    };
    SparsityReport {
        prunable_count: prunable,
        kept_count: kept,
        achieved_ratio: prunable as f64 / kept as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_mlp, kaiming_init, Mode, Optimizer, OptimizerKind, Tensor};
    use proptest::prelude::*;

    fn lin(o: usize, i: usize, w: Vec<f64>) -> LayerParams<f64> {
        LayerParams::Linear {
            weight: Tensor::new(vec![o, i], w).unwrap(),
            bias: Tensor::zeros(vec![o]),
        }
    }

    fn linear_net(
        shapes: &[(usize, usize)],
        encoder_end: usize,
        weights: Vec<Vec<f64>>,
    ) -> ModelState<f64> {
        let layers = shapes
            .iter()
            .map(|&(o, i)| LayerSpec::Linear {
                in_dim: i,
                out_dim: o,
            })
            .collect();
        let spec = NetworkSpec::new(layers, encoder_end, shapes.last().unwrap().0).unwrap();
        let params = shapes
            .iter()
            .zip(weights)
            .map(|(&(o, i), w)| lin(o, i, w))
            .collect();
        ModelState::from_params(spec, params).unwrap()
    }

    /// Full sort of every encoder weight by (|w| desc, layer, index).
    fn oracle_keep(model: &ModelState<f64>, r: f64) -> Vec<(usize, usize)> {
        let mut all = Vec::new();
        for l in model.spec().prunable_layers() {
            for (j, w) in model.params()[l]
                .weight()
                .unwrap()
                .values()
                .iter()
                .enumerate()
            {
                all.push((w.abs(), l, j));
            }
        }
        all.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let keep = (all.len() as f64 / r).floor() as usize;
        let mut kept: Vec<(usize, usize)> = all[..keep].iter().map(|&(_, l, j)| (l, j)).collect();
        kept.sort();
        kept
    }

    fn kept_positions(mask: &PruneMask, model: &ModelState<f64>) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for l in model.spec().prunable_layers() {
            for (j, &k) in mask.keep(l).unwrap().iter().enumerate() {
                if k {
                    out.push((l, j));
                }
            }
        }
        out
    }

    #[test]
    fn single_layer_hand_case() {
        let m = linear_net(
            &[(2, 2), (2, 2)],
            1,
            vec![vec![0.1, -0.5, 0.3, 0.05], vec![1.0; 4]],
        );
        let mask = global_magnitude_prune(&m, 2.0).unwrap();
        assert_eq!(mask.keep(0).unwrap(), &[false, true, true, false]);
        assert_eq!(mask.keep(1).unwrap(), &[true; 4]);
        assert_eq!(global_magnitude_prune(&m, 1.0).unwrap().kept_count(), 4);
        assert!(global_magnitude_prune(&m, 5.0).is_err());
        assert!(global_magnitude_prune(&m, 0.5).is_err());
    }

    #[test]
    fn ranking_is_global_not_layerwise() {
        let m = linear_net(
            &[(1, 1), (2, 1), (2, 2)],
            2,
            vec![vec![0.2], vec![0.1, 0.3], vec![1.0; 4]],
        );
        let mask = global_magnitude_prune(&m, 3.0).unwrap();
        assert_eq!(mask.keep(0).unwrap(), &[false]);
        assert_eq!(mask.keep(1).unwrap(), &[false, true]);
        assert_eq!(kept_positions(&mask, &m), oracle_keep(&m, 3.0));
    }

    #[test]
    fn ties_go_to_lower_layer_and_index() {
        let m = linear_net(&[(1, 2), (1, 1)], 1, vec![vec![0.5, -0.5], vec![1.0]]);
        let mask = global_magnitude_prune(&m, 2.0).unwrap();
        assert_eq!(mask.keep(0).unwrap(), &[true, false]);
    }

    #[test]
    fn pis_scales_linear_weights_only() {
        let spec = build_mlp(5, &[8, 8], 3).unwrap();
        let base: ModelState<f64> = kaiming_init(&spec, 9).unwrap();
        let one = pis_init::<f64>(
            &spec,
            InitSpec {
                scheme: InitScheme::Kaiming,
                kappa: 1.0,
                seed: 9,
            },
        )
        .unwrap();
        assert_eq!(base.params(), one.params());
        let quarter = pis_init::<f64>(
            &spec,
            InitSpec {
                scheme: InitScheme::Kaiming,
                kappa: 0.25,
                seed: 9,
            },
        )
        .unwrap();
        for (a, b) in base.params().iter().zip(quarter.params()) {
            match (a, b) {
                (
                    LayerParams::Linear {
                        weight: wa,
                        bias: ba,
                    },
                    LayerParams::Linear {
                        weight: wb,
                        bias: bb,
                    },
                ) => {
                    for (x, y) in wa.values().iter().zip(wb.values()) {
                        assert_eq!(*y, 0.25 * x);
                    }
                    assert_eq!(ba.values(), bb.values());
                }
                _ => assert_eq!(a, b),
            }
        }
        assert_eq!(quarter.init_snapshot().unwrap(), quarter.params());
        assert_eq!(quarter.init_scale(), 0.25);
        for k in [0.0, -1.0, f64::NAN] {
            assert!(pis_init::<f64>(
                &spec,
                InitSpec {
                    scheme: InitScheme::Kaiming,
                    kappa: k,
                    seed: 9
                }
            )
            .is_err());
        }
    }

    #[test]
    fn lottery_reinit_cases() {
        let mut m = linear_net(
            &[(2, 2), (1, 2)],
            1,
            vec![vec![0.1, -0.2, 0.3, -0.4], vec![0.5, 0.6]],
        );
        // move away from the snapshot
        for p in m.params_layers_mut() {
            if let Some(w) = p.weight_mut() {
                w.map_inplace(|v| v * 3.0 + 1.0);
            }
        }
        let snapshot = m.init_snapshot().unwrap().to_vec();

        let ones = PruneMask::all_ones(m.spec());
        let r = lottery_reinit(&ones, &m).unwrap();
        assert_eq!(r.params(), snapshot.as_slice());

        let zeros = PruneMask::from_layers(
            m.spec(),
            vec![Some(vec![false; 4]), Some(vec![true; 2])],
            1.0,
        )
        .unwrap();
        let r = lottery_reinit(&zeros, &m).unwrap();
        assert!(r.params()[0]
            .weight()
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(r.params()[1], snapshot[1]);

        let mixed = PruneMask::from_layers(
            m.spec(),
            vec![Some(vec![true, false, false, true]), Some(vec![true; 2])],
            2.0,
        )
        .unwrap();
        let r = lottery_reinit(&mixed, &m).unwrap();
        assert_eq!(
            r.params()[0].weight().unwrap().values(),
            &[0.1, 0.0, 0.0, -0.4]
        );

        let bad = PruneMask::from_layers(
            m.spec(),
            vec![Some(vec![true; 4]), Some(vec![true, false])],
            1.0,
        );
        assert!(bad.is_err() || lottery_reinit(&bad.unwrap(), &m).is_err());

        let mut no_snapshot = m.clone();
        no_snapshot.drop_snapshot();
        assert!(matches!(
            lottery_reinit(&ones, &no_snapshot),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn sparsity_reports() {
        let spec = build_mlp(21, &[64, 64, 64], 2).unwrap();
        let mut m: ModelState<f64> = kaiming_init(&spec, 1).unwrap();
        assert_eq!(sparsity_report(&m).achieved_ratio, 1.0);
        let mask = global_magnitude_prune(&m, 8.0).unwrap();
        let achieved = mask.achieved_ratio();
        apply_mask(&mut m, mask).unwrap();
        let rep = sparsity_report(&m);
        assert_eq!(rep.achieved_ratio, achieved);
        assert!((7.9..=8.1).contains(&rep.achieved_ratio));

        let m = linear_net(
            &[(2, 5), (1, 2)],
            1,
            vec![(1..=10).map(f64::from).collect(), vec![1.0, 1.0]],
        );
        let mask = global_magnitude_prune(&m, 2.0).unwrap();
        assert_eq!(mask.kept_count(), 5);
        assert_eq!(mask.achieved_ratio(), 2.0);
    }

    #[test]
    fn masked_weights_stay_zero_through_training() {
        let spec = build_mlp(4, &[6, 6], 2).unwrap();
        let mut m: ModelState<f64> = kaiming_init(&spec, 3).unwrap();
        let mask = global_magnitude_prune(&m, 4.0).unwrap();
        let reference = {
            let mut z = m.clone();
            for l in spec.prunable_layers() {
                let keep = mask.keep(l).unwrap().to_vec();
                let w = z.params_layers_mut()[l].weight_mut().unwrap();
                for (v, k) in w.values_mut().iter_mut().zip(keep) {
                    if !k {
                        *v = 0.0;
                    }
                }
            }
            z
        };
        apply_mask(&mut m, mask.clone()).unwrap();
        let x = ndarray::Array2::from_shape_fn((8, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        assert_eq!(
            m.infer(x.view()).unwrap().logits,
            reference.infer(x.view()).unwrap().logits
        );
        let y: Vec<usize> = (0..8).map(|i| i % 2).collect();
        for kind in [OptimizerKind::sgd_nesterov(0.9), OptimizerKind::adamw(0.01)] {
            let mut model = m.clone();
            let mut opt = Optimizer::new(kind, 0.05);
            for _ in 0..10 {
                crate::objective::sup_loss(&mut model, x.view(), &y).unwrap();
                opt.step(&mut model).unwrap();
                for l in spec.prunable_layers() {
                    let w = model.params()[l].weight().unwrap().values();
                    for (v, &k) in w.iter().zip(mask.keep(l).unwrap()) {
                        assert!(k || *v == 0.0);
                    }
                }
            }
            assert_eq!(model.mode(), Mode::Train);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn mask_matches_sort_oracle(
            seed in 0u64..1000,
            widths in proptest::collection::vec(1usize..12, 1..4),
            r_idx in 0usize..4,
            quantize in any::<bool>(),
        ) {
            let r = [2.0, 4.0, 8.0, 16.0][r_idx];
            let spec = build_mlp(5, &widths, 3).unwrap();
            let mut m: ModelState<f64> = kaiming_init(&spec, seed).unwrap();
            if quantize {
                // force many ties
                for p in m.params_layers_mut() {
                    if let Some(w) = p.weight_mut() {
                        w.map_inplace(|v| (v * 4.0).round() / 4.0);
                    }
                }
            }
            let total = spec.prunable_weight_count();
            prop_assume!(keep_count(total, r) > 0);
            let mask = global_magnitude_prune(&m, r).unwrap();
            prop_assert_eq!(mask.kept_count(), keep_count(total, r));
            prop_assert_eq!(kept_positions(&mask, &m), oracle_keep(&m, r));
            let mut min_kept = f64::INFINITY;
            let mut max_dropped = 0.0f64;
            for l in spec.prunable_layers() {
                let w = m.params()[l].weight().unwrap().values();
                for (v, &k) in w.iter().zip(mask.keep(l).unwrap()) {
                    if k { min_kept = min_kept.min(v.abs()) } else { max_dropped = max_dropped.max(v.abs()) }
                }
            }
            prop_assert!(min_kept >= max_dropped);
            for l in spec.linear_layers().filter(|&l| l >= spec.encoder_end()) {
                prop_assert!(mask.keep(l).unwrap().iter().all(|&k| k));
            }
            // ranking is invariant to uniform rescaling
            let mut scaled = m.clone();
            for p in scaled.params_layers_mut() {
                if let Some(w) = p.weight_mut() {
                    w.map_inplace(|v| v * 0.125);
                }
            }
            let rescaled = global_magnitude_prune(&scaled, r).unwrap();
            prop_assert_eq!(rescaled.layers(), mask.layers());
        }
    }
}
