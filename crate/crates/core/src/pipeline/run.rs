//! Supernetwork training, pruning, reinitialization and fine-tuning.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::Augmenter;
use crate::data::{
    batch_iter, empirical_marginals, standardize, stratified_batches, EmpiricalMarginal,
    ImageDataset, RawTable, Schema, TabularDataset,
};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy, balanced_accuracy, consistency, first_layer_magnitudes, weight_histogram,
    write_grid_csv, MetricsRecord, MetricsWriter,
};
use crate::nn::{
    build_mlp, build_mlp_tab, build_mlp_vis, save_checkpoint, Mode, ModelState, NetworkSpec,
    Optimizer,
};
use crate::objective::{ilo_loss, sup_loss, LossBreakdown};
use crate::pipeline::config::{Arch, DataKind, ExperimentConfig, ReinitScale};
use crate::prune::{
    global_magnitude_prune, lottery_reinit, lottery_reinit_rescaled, pis_init, InitSpec, PruneMask,
};
use crate::scalar::Scalar;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_4753;
const FINETUNE_STREAM: u64 = 0x4649_4e45;

/// Derives an independent seed for one purpose from the master seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream));
    rng.set_stream(epoch as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Tabular,
    Image { channels: usize, side: usize },
}

/// Split, imputed and standardized data plus the training marginals.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: TabularDataset,
    pub valid: TabularDataset,
    pub test: TabularDataset,
    pub domain: Domain,
    pub marginals: Arc<EmpiricalMarginal>,
}

impl PreparedData {
    pub fn class_count(&self) -> usize {
        self.train.class_count
    }

    pub fn n_features(&self) -> usize {
        self.train.n_features()
    }

    pub fn split(&self, name: &str) -> Result<&TabularDataset> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            _ => Err(Error::config("split", format!("unknown split `{name}`"))),
        }
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let split = &cfg.data.split;
    let (mut train, mut valid, mut test, domain) = match cfg.data.kind {
        DataKind::Tabular => {
            let path = cfg.data.path.as_ref().expect("validated");
            let schema = Schema::from_file(cfg.data.schema.as_ref().expect("validated"))?;
            let raw = RawTable::read(path, &schema)?;
            let idx = split.indices(raw.len())?;
            let ds = raw.impute(&idx.train)?;
            (
                ds.select(&idx.train),
                ds.select(&idx.valid),
                ds.select(&idx.test),
                Domain::Tabular,
            )
        }
        DataKind::Synthetic => {
            let ds = cfg.data.synthetic.as_ref().expect("validated").generate()?;
            let idx = split.indices(ds.len())?;
            (
                ds.select(&idx.train),
                ds.select(&idx.valid),
                ds.select(&idx.test),
                Domain::Tabular,
            )
        }
        DataKind::Image => {
            let images = ImageDataset::load(cfg.data.path.as_ref().expect("validated"))?;
            let domain = Domain::Image {
                channels: images.channels(),
                side: images.side(),
            };
            let ds = images.to_flat()?;
            let idx = split.indices(ds.len())?;
            (
                ds.select(&idx.train),
                ds.select(&idx.valid),
                ds.select(&idx.test),
                domain,
            )
        }
    };
    if cfg.data.standardize && domain == Domain::Tabular {
        standardize(&mut train, &mut [&mut valid, &mut test]);
    }
    let marginals = Arc::new(empirical_marginals(&train));
    Ok(PreparedData {
        train,
        valid,
        test,
        domain,
        marginals,
    })
}

pub fn build_spec(cfg: &ExperimentConfig, data: &PreparedData) -> Result<NetworkSpec> {
    let classes = data.class_count();
    match cfg.model.arch {
        Arch::MlpTab => build_mlp_tab(data.n_features(), classes),
        Arch::Mlp => build_mlp(
            data.n_features(),
            cfg.model.hidden.as_deref().expect("validated"),
            classes,
        ),
        Arch::MlpVis => match data.domain {
            Domain::Image { channels, side } => build_mlp_vis(
                cfg.model.alpha.expect("validated"),
                side * side,
                channels,
                classes,
            ),
            Domain::Tabular => Err(Error::config("model.arch", "mlp_vis needs image data")),
        },
    }
}

pub fn build_augmenter(cfg: &ExperimentConfig, data: &PreparedData) -> Result<Augmenter> {
    let set = cfg.transform_set()?;
    match data.domain {
        Domain::Tabular => Augmenter::tabular(set, data.marginals.clone()),
        Domain::Image { channels, side } => Augmenter::image(set, channels, side),
    }
}

/// One split converted to the model's scalar type.
#[derive(Debug, Clone)]
pub struct SplitData<T> {
    pub x: Array2<T>,
    pub y: Vec<usize>,
}

impl<T: Scalar> SplitData<T> {
    pub fn from_dataset(ds: &TabularDataset) -> Self {
        Self {
            x: ds.features.mapv(T::of),
            y: ds.labels.clone(),
        }
    }

    fn batch(&self, idx: &[usize]) -> (Array2<T>, Vec<usize>) {
        (
            self.x.select(Axis(0), idx),
            idx.iter().map(|&i| self.y[i]).collect(),
        )
    }
}

/// Everything a run needs: configuration, data, output location and the
/// open metrics file.
pub struct RunContext<T> {
    pub cfg: ExperimentConfig,
    pub data: Arc<PreparedData>,
    pub spec: NetworkSpec,
    pub augmenter: Augmenter,
    pub train: SplitData<T>,
    pub valid: SplitData<T>,
    pub test: SplitData<T>,
    out_dir: Option<PathBuf>,
    metrics: Option<MetricsWriter>,
    timings: BTreeMap<String, f64>,
    artifacts: BTreeMap<String, PathBuf>,
}

impl<T: Scalar> RunContext<T> {
    /// `out_dir = None` keeps everything in memory.
    pub fn new(
        cfg: ExperimentConfig,
        data: Arc<PreparedData>,
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        let spec = build_spec(&cfg, &data)?;
        let augmenter = build_augmenter(&cfg, &data)?;
        let mut ctx = Self {
            train: SplitData::from_dataset(&data.train),
            valid: SplitData::from_dataset(&data.valid),
            test: SplitData::from_dataset(&data.test),
            cfg,
            data,
            spec,
            augmenter,
            out_dir: out_dir.map(Path::to_path_buf),
            metrics: None,
            timings: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        };
        if let Some(dir) = &ctx.out_dir {
            for sub in ["", "checkpoints", "histograms", "weights"] {
                let d = dir.join(sub);
                std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
            let path = dir.join("metrics.csv");
            let names = ctx.transform_names();
            ctx.metrics = Some(if path.exists() {
                MetricsWriter::append(&path, &names)?
            } else {
                MetricsWriter::create(&path, &names)?
            });
            ctx.artifacts.insert("metrics".into(), path);
        }
        Ok(ctx)
    }

    pub fn transform_names(&self) -> Vec<String> {
        self.augmenter
            .set()
            .members()
            .iter()
            .map(|m| m.name().to_string())
            .collect()
    }

    pub fn out_dir(&self) -> Option<&Path> {
        self.out_dir.as_deref()
    }

    pub fn timings(&self) -> &BTreeMap<String, f64> {
        &self.timings
    }

    pub fn artifacts(&self) -> &BTreeMap<String, PathBuf> {
        &self.artifacts
    }

    fn batch_size(&self) -> usize {
        self.cfg.train.batch_size.min(self.train.y.len())
    }

    fn split(&self, name: &str) -> &SplitData<T> {
        match name {
            "train" => &self.train,
            "valid" => &self.valid,
            _ => &self.test,
        }
    }

    fn record(&mut self, r: &MetricsRecord) -> Result<()> {
        match &mut self.metrics {
            Some(w) => w.write(r),
            None => Ok(()),
        }
    }

    fn save(&mut self, model: &ModelState<T>, name: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let path = dir.join("checkpoints").join(format!("{name}.ckpt"));
            save_checkpoint(model, &path)?;
            self.artifacts.insert(name.to_string(), path);
        }
        Ok(())
    }

    fn dump_histogram(&mut self, model: &ModelState<T>, phase: &str, epoch: usize) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let h = weight_histogram(model, self.cfg.eval.histogram_bins, epoch)?;
            h.write_csv(
                &dir.join("histograms")
                    .join(format!("{phase}_epoch_{epoch:03}.csv")),
            )?;
            self.artifacts
                .insert("histograms".into(), dir.join("histograms"));
        }
        Ok(())
    }

    fn dump_first_layer(&mut self, model: &ModelState<T>, name: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let path = dir.join("weights").join(format!("{name}_first_layer.csv"));
            write_grid_csv(&first_layer_magnitudes(model)?, &path)?;
            self.artifacts.insert(format!("{name}_first_layer"), path);
        }
        Ok(())
    }

    /// Accuracy and balanced accuracy on a split, without consistency.
    pub fn quick_metrics(
        &self,
        model: &ModelState<T>,
        split: &str,
        phase: &str,
        epoch: usize,
        loss: Option<LossBreakdown>,
    ) -> Result<MetricsRecord> {
        let s = self.split(split);
        let preds = predict_all(model, &s.x, self.cfg.train.batch_size)?;
        Ok(MetricsRecord {
            phase: phase.into(),
            epoch,
            split: split.into(),
            accuracy: accuracy(&preds, &s.y)?,
            balanced_accuracy: balanced_accuracy(&preds, &s.y, self.data.class_count())?,
            consistency: BTreeMap::new(),
            loss,
        })
    }

    /// Full metrics including consistency under every member transform.
    /// Each transform gets its own stream seeded from `eval.seed`.
    pub fn full_metrics(
        &self,
        model: &ModelState<T>,
        split: &str,
        phase: &str,
        epoch: usize,
    ) -> Result<MetricsRecord> {
        let mut r = self.quick_metrics(model, split, phase, epoch, None)?;
        let s = self.split(split);
        for (i, name) in self.transform_names().iter().enumerate() {
            let aug = self.augmenter.restricted(name).expect("member");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.eval.seed, i as u64));
            let c = consistency(
                model,
                s.x.view(),
                &aug,
                self.cfg.eval.consistency_draws,
                self.cfg.train.batch_size,
                &mut rng,
            )?;
            r.consistency.insert(name.clone(), c);
        }
        Ok(r)
    }
}

fn predict_all<T: Scalar>(
    model: &ModelState<T>,
    x: &Array2<T>,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(x.nrows());
    for r in crate::data::eval_batches(x.nrows(), batch_size.max(1)) {
        out.extend(model.predict(x.slice(ndarray::s![r, ..]))?);
    }
    Ok(out)
}

fn mean_breakdown(parts: &[LossBreakdown], lambda: f64) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let sup = parts.iter().map(|b| b.l_sup).sum::<f64>() / n;
    let nce = parts.iter().map(|b| b.l_nce).sum::<f64>() / n;
    LossBreakdown::new(sup, nce, lambda)
}

fn divergence(err: Error, phase: &str, epoch: usize) -> Error {
    match err {
        Error::Numeric { .. } => Error::Divergence {
            phase: phase.to_string(),
            epoch,
        },
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct SupernetOutcome<T> {
    /// Trained weights with the initial snapshot attached.
    pub model: ModelState<T>,
    pub contrastive_batches: usize,
    pub last_loss: LossBreakdown,
}

/// Kappa-scaled initialization followed by `pretrain.epochs` of ILO training
/// with Nesterov SGD. With `lambda = 0` the contrastive term is never built.
pub fn run_supernet<T: Scalar>(ctx: &mut RunContext<T>) -> Result<SupernetOutcome<T>> {
    let start = Instant::now();
    let cfg = ctx.cfg.clone();
    let seed = cfg.seed;
    let lambda = cfg.objective.lambda;
    let mut model = pis_init::<T>(
        &ctx.spec,
        InitSpec {
            scheme: cfg.init.scheme,
            kappa: cfg.init.kappa,
            seed,
        },
    )?;
    ctx.save(&model, "init")?;
    ctx.dump_histogram(&model, "pretrain", 0)?;
    ctx.dump_first_layer(&model, "init")?;
    let mut opt = Optimizer::new(cfg.pretrain_optimizer(), cfg.pretrain.lr);
    let bs = ctx.batch_size();
    let mut contrastive_batches = 0;
    let mut last_loss = LossBreakdown::new(f64::NAN, f64::NAN, lambda);
    for epoch in 0..cfg.pretrain.epochs {
        let batches = stratified_batches(
            &ctx.train.y,
            bs,
            derive_seed(seed, SHUFFLE_STREAM),
            epoch,
            Mode::Train,
        );
        let mut rng = stream_rng(seed, AUGMENT_STREAM, epoch);
        let mut parts = Vec::with_capacity(batches.len());
        for idx in &batches {
            let (xb, yb) = ctx.train.batch(idx);
            let b = if lambda > 0.0 {
                contrastive_batches += 1;
                ilo_loss(
                    &mut model,
                    xb.view(),
                    &yb,
                    &ctx.augmenter,
                    lambda,
                    cfg.objective.form,
                    &mut rng,
                )?
            } else {
                LossBreakdown::supervised(sup_loss(&mut model, xb.view(), &yb)?)
            };
            if !b.total.is_finite() {
                return Err(Error::Divergence {
                    phase: "pretrain".into(),
                    epoch,
                });
            }
            opt.step(&mut model)
                .map_err(|e| divergence(e, "pretrain", epoch))?;
            parts.push(b);
        }
        last_loss = mean_breakdown(&parts, lambda);
        let r = ctx.quick_metrics(&model, "valid", "pretrain", epoch + 1, Some(last_loss))?;
        ctx.record(&r)?;
        ctx.dump_histogram(&model, "pretrain", epoch + 1)?;
        ctx.save(&model, "supernet")?;
    }
    if cfg.pretrain.epochs == 0 {
        ctx.save(&model, "supernet")?;
    }
    ctx.dump_first_layer(&model, "supernet")?;
    ctx.timings
        .insert("pretrain".into(), start.elapsed().as_secs_f64());
    Ok(SupernetOutcome {
        model,
        contrastive_batches,
        last_loss,
    })
}

/// Global magnitude pruning of the trained supernetwork followed by
/// lottery-ticket reinitialization.
pub fn prune_and_reinit<T: Scalar>(
    ctx: &mut RunContext<T>,
    supernet: &ModelState<T>,
) -> Result<(PruneMask, ModelState<T>)> {
    let start = Instant::now();
    let mask = global_magnitude_prune(supernet, ctx.cfg.prune.ratio)?;
    let reinit = match ctx.cfg.prune.reinit_scale {
        ReinitScale::Snapshot => lottery_reinit(&mask, supernet)?,
        ReinitScale::Unscaled => {
            lottery_reinit_rescaled(&mask, supernet, 1.0 / supernet.init_scale())?
        }
    };
    ctx.save(&reinit, "reinit")?;
    if let Some(p) = ctx.artifacts.get("reinit").cloned() {
        ctx.artifacts.insert("mask".into(), p);
    }
    ctx.timings
        .insert("prune".into(), start.elapsed().as_secs_f64());
    Ok((mask, reinit))
}

#[derive(Debug, Clone)]
pub struct FinalMetrics {
    pub valid: MetricsRecord,
    pub test: MetricsRecord,
}

impl FinalMetrics {
    /// Balanced accuracy for tabular data, accuracy for images.
    pub fn headline(&self, image: bool) -> f64 {
        if image {
            self.test.accuracy
        } else {
            self.test.balanced_accuracy
        }
    }
}

/// Supervised-only training of `model` under the fine-tuning optimizer and
/// schedule, then final metrics on the valid and test splits.
pub fn finetune<T: Scalar>(
    ctx: &mut RunContext<T>,
    mut model: ModelState<T>,
) -> Result<(ModelState<T>, FinalMetrics)> {
    let start = Instant::now();
    let cfg = ctx.cfg.clone();
    let (kind, schedule) = cfg.finetune_optimizer();
    let mut opt = Optimizer::new(kind, schedule.lr(0));
    let bs = ctx.batch_size();
    let seed = derive_seed(cfg.seed, FINETUNE_STREAM);
    for epoch in 0..cfg.finetune.epochs {
        opt.set_lr(schedule.lr(epoch));
        let mut total = 0.0;
        let batches = batch_iter(ctx.train.y.len(), bs, seed, epoch, Mode::Train);
        for idx in &batches {
            let (xb, yb) = ctx.train.batch(idx);
            let loss = sup_loss(&mut model, xb.view(), &yb)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    phase: "finetune".into(),
                    epoch,
                });
            }
            opt.step(&mut model)
                .map_err(|e| divergence(e, "finetune", epoch))?;
            total += loss;
        }
        let loss = LossBreakdown::supervised(total / batches.len().max(1) as f64);
        let r = ctx.quick_metrics(&model, "valid", "finetune", epoch + 1, Some(loss))?;
        ctx.record(&r)?;
    }
    model.set_mode(Mode::Eval);
    ctx.save(&model, "final")?;
    ctx.dump_first_layer(&model, "final")?;
    let epoch = cfg.finetune.epochs;
    let valid = ctx.full_metrics(&model, "valid", "final", epoch)?;
    let test = ctx.full_metrics(&model, "test", "final", epoch)?;
    ctx.record(&valid)?;
    ctx.record(&test)?;
    ctx.timings
        .insert("finetune".into(), start.elapsed().as_secs_f64());
    Ok((model, FinalMetrics { valid, test }))
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome<T> {
    pub supernet: SupernetOutcome<T>,
    pub mask: PruneMask,
    pub reinit: ModelState<T>,
    pub final_model: ModelState<T>,
    pub metrics: FinalMetrics,
}

pub fn run_prune_finetune<T: Scalar>(
    ctx: &mut RunContext<T>,
    supernet: &ModelState<T>,
) -> Result<(PruneMask, ModelState<T>, ModelState<T>, FinalMetrics)> {
    let (mask, reinit) = prune_and_reinit(ctx, supernet)?;
    let (final_model, metrics) = finetune(ctx, reinit.clone())?;
    Ok((mask, reinit, final_model, metrics))
}

/// Supernetwork, pruning, reinitialization and fine-tuning in sequence.
pub fn run_pipeline<T: Scalar>(ctx: &mut RunContext<T>) -> Result<PipelineOutcome<T>> {
    let supernet = run_supernet(ctx)?;
    let (mask, reinit, final_model, metrics) = run_prune_finetune(ctx, &supernet.model)?;
    Ok(PipelineOutcome {
        supernet,
        mask,
        reinit,
        final_model,
        metrics,
    })
}
