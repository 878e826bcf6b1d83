//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{TransformKind, TransformSet};
use crate::data::{SplitSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::{InitScheme, LrSchedule, OptimizerKind};
use crate::objective::ContrastiveForm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for initialization, batch order and transform draws.
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Tabular,
    Image,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// CSV file (tabular) or raw tensor file (image). Relative paths are
    /// resolved against the config file's directory.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<PathBuf>,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    MlpTab,
    MlpVis,
    /// Explicit hidden widths.
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    #[serde(default)]
    pub alpha: Option<usize>,
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    #[serde(default = "kaiming")]
    pub scheme: InitScheme,
    #[serde(default = "quarter")]
    pub kappa: f64,
}

fn kaiming() -> InitScheme {
    InitScheme::Kaiming
}

fn quarter() -> f64 {
    0.25
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            scheme: InitScheme::Kaiming,
            kappa: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default)]
    pub form: ContrastiveForm,
    /// Defaults to the SimCLR family for images and feature corruption
    /// for tabular data.
    #[serde(default)]
    pub transforms: Option<Vec<TransformKind>>,
}

fn one() -> f64 {
    1.0
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            form: ContrastiveForm::NegativesOnly,
            transforms: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "sixty")]
    pub epochs: usize,
    #[serde(default = "milli")]
    pub lr: f64,
    #[serde(default = "nine_tenths")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn sixty() -> usize {
    60
}

fn milli() -> f64 {
    0.001
}

fn nine_tenths() -> f64 {
    0.9
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReinitScale {
    /// Masked kappa-scaled snapshot.
    #[default]
    Snapshot,
    /// Masked snapshot divided by kappa, i.e. the unscaled base draw.
    Unscaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    #[serde(default = "eight")]
    pub ratio: f64,
    #[serde(default)]
    pub reinit_scale: ReinitScale,
}

fn eight() -> f64 {
    8.0
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            ratio: 8.0,
            reinit_scale: ReinitScale::Snapshot,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneOptimizer {
    /// AdamW with cosine restarts for tabular networks, Nesterov SGD for vision.
    Auto,
    Adamw,
    SgdNesterov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "forty_five")]
    pub epochs: usize,
    #[serde(default = "auto")]
    pub optimizer: FinetuneOptimizer,
    #[serde(default = "milli")]
    pub lr: f64,
    #[serde(default = "hundredth")]
    pub weight_decay: f64,
    #[serde(default = "nine_tenths")]
    pub momentum: f64,
    #[serde(default = "fifteen")]
    pub restart_budget: usize,
    #[serde(default = "two")]
    pub restart_multiplier: f64,
    /// Cosine restarts; `false` keeps the rate constant.
    #[serde(default = "yes")]
    pub cosine: bool,
}

fn forty_five() -> usize {
    45
}

fn auto() -> FinetuneOptimizer {
    FinetuneOptimizer::Auto
}

fn hundredth() -> f64 {
    0.01
}

fn fifteen() -> usize {
    15
}

fn two() -> f64 {
    2.0
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 45,
            optimizer: FinetuneOptimizer::Auto,
            lr: 0.001,
            weight_decay: 0.01,
            momentum: 0.9,
            restart_budget: 15,
            restart_multiplier: 2.0,
            cosine: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub precision: Precision,
}

fn batch() -> usize {
    128
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "k8")]
    pub consistency_draws: usize,
    /// Seed of the transform stream used by the consistency metric.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "forty")]
    pub histogram_bins: usize,
}

fn k8() -> usize {
    8
}

fn forty() -> usize {
    40
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            consistency_draws: 8,
            seed: 0,
            histogram_bins: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_arms")]
    pub arms: Vec<String>,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    #[serde(default = "default_kappas")]
    pub kappas: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_arms() -> Vec<String> {
    vec!["full".into()]
}

fn default_ratios() -> Vec<f64> {
    vec![2.0, 4.0, 8.0, 16.0]
}

fn default_kappas() -> Vec<f64> {
    vec![0.25, 0.125, 0.0625]
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            arms: default_arms(),
            ratios: default_ratios(),
            kappas: default_kappas(),
            seeds: default_seeds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "runs")]
    pub dir: PathBuf,
}

fn runs() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: runs() }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be positive, got {v}")))
    }
}

/// `line N (snippet)` for a parse error span, `(root)` when the error has no
/// position (e.g. a missing top-level table).
fn parse_location(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(s) if s.end > 0 && s.end <= text.len() => {
            let line = text[..s.start].matches('\n').count() + 1;
            let snippet: String = text[s.clone()].chars().take(40).collect();
            format!("line {line} ({})", snippet.trim())
        }
        _ => "(root)".to_string(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| Error::config(parse_location(text, e.span()), e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, parses and validates; relative data paths are resolved against
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            key: path.display().to_string(),
            message: format!("cannot read config file: {e}"),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.path, &mut cfg.data.schema]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.split.validate()?;
        match self.data.kind {
            DataKind::Tabular => {
                if self.data.path.is_none() {
                    return Err(Error::config("data.path", "required for tabular data"));
                }
                if self.data.schema.is_none() {
                    return Err(Error::config("data.schema", "required for tabular data"));
                }
            }
            DataKind::Image => {
                if self.data.path.is_none() {
                    return Err(Error::config("data.path", "required for image data"));
                }
            }
            DataKind::Synthetic => {
                let s = self.data.synthetic.as_ref().ok_or_else(|| {
                    Error::config("data.synthetic", "required for synthetic data")
                })?;
                if s.n_samples < 5 {
                    return Err(Error::config(
                        "data.synthetic.n_samples",
                        "need at least 5 samples",
                    ));
                }
                if s.n_features == 0 {
                    return Err(Error::config(
                        "data.synthetic.n_features",
                        "must be positive",
                    ));
                }
            }
        }
        match self.model.arch {
            Arch::MlpVis => {
                if self.data.kind != DataKind::Image {
                    return Err(Error::config("model.arch", "mlp_vis needs image data"));
                }
                match self.model.alpha {
                    Some(a) if a > 0 => {}
                    _ => {
                        return Err(Error::config(
                            "model.alpha",
                            "mlp_vis needs a positive alpha",
                        ))
                    }
                }
            }
            Arch::Mlp => match &self.model.hidden {
                Some(h) if !h.is_empty() && h.iter().all(|&w| w > 0) => {}
                _ => {
                    return Err(Error::config(
                        "model.hidden",
                        "mlp needs non-empty positive widths",
                    ))
                }
            },
            Arch::MlpTab => {}
        }
        positive("init.kappa", self.init.kappa)?;
        if !(self.objective.lambda >= 0.0 && self.objective.lambda.is_finite()) {
            return Err(Error::config(
                "objective.lambda",
                "must be a finite value >= 0",
            ));
        }
        self.transform_set()
            .map_err(|e| Error::config("objective.transforms", e.to_string()))?;
        positive("pretrain.lr", self.pretrain.lr)?;
        if !(0.0..1.0).contains(&self.pretrain.momentum) {
            return Err(Error::config("pretrain.momentum", "must lie in [0, 1)"));
        }
        if self.pretrain.weight_decay < 0.0 {
            return Err(Error::config("pretrain.weight_decay", "must be >= 0"));
        }
        if !(self.prune.ratio >= 1.0 && self.prune.ratio.is_finite()) {
            return Err(Error::config(
                "prune.ratio",
                format!("must be >= 1, got {}", self.prune.ratio),
            ));
        }
        positive("finetune.lr", self.finetune.lr)?;
        if self.finetune.weight_decay < 0.0 {
            return Err(Error::config("finetune.weight_decay", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.finetune.momentum) {
            return Err(Error::config("finetune.momentum", "must lie in [0, 1)"));
        }
        if self.finetune.restart_budget == 0 {
            return Err(Error::config("finetune.restart_budget", "must be positive"));
        }
        if self.finetune.restart_multiplier.is_nan() || self.finetune.restart_multiplier < 1.0 {
            return Err(Error::config("finetune.restart_multiplier", "must be >= 1"));
        }
        if self.train.batch_size < 2 {
            return Err(Error::config(
                "train.batch_size",
                "must be at least 2 for batchnorm",
            ));
        }
        if self.eval.consistency_draws == 0 {
            return Err(Error::config("eval.consistency_draws", "must be positive"));
        }
        if self.eval.histogram_bins == 0 {
            return Err(Error::config("eval.histogram_bins", "must be positive"));
        }
        for (i, arm) in self.sweep.arms.iter().enumerate() {
            crate::pipeline::Arm::parse(arm).ok_or_else(|| {
                Error::config(format!("sweep.arms[{i}]"), format!("unknown arm `{arm}`"))
            })?;
        }
        for (i, &r) in self.sweep.ratios.iter().enumerate() {
            if !(r >= 1.0 && r.is_finite()) {
                return Err(Error::config(format!("sweep.ratios[{i}]"), "must be >= 1"));
            }
        }
        for (i, &k) in self.sweep.kappas.iter().enumerate() {
            positive(&format!("sweep.kappas[{i}]"), k)?;
        }
        Ok(())
    }

    pub fn is_image(&self) -> bool {
        self.data.kind == DataKind::Image
    }

    pub fn transform_set(&self) -> Result<TransformSet> {
        match &self.objective.transforms {
            Some(t) => {
                let set = TransformSet::new(t.clone())?;
                if set.is_image() != self.is_image() {
                    return Err(Error::param(
                        "transforms",
                        "transform family does not match the data domain",
                    ));
                }
                Ok(set)
            }
            None if self.is_image() => Ok(TransformSet::simclr_default()),
            None => Ok(TransformSet::scarf_default()),
        }
    }

    pub fn pretrain_optimizer(&self) -> OptimizerKind {
        OptimizerKind::SgdNesterov {
            momentum: self.pretrain.momentum,
            weight_decay: self.pretrain.weight_decay,
        }
    }

    /// Fine-tuning optimizer and schedule after resolving `auto`.
    pub fn finetune_optimizer(&self) -> (OptimizerKind, LrSchedule) {
        let f = &self.finetune;
        let adamw = match f.optimizer {
            FinetuneOptimizer::Auto => !self.is_image(),
            FinetuneOptimizer::Adamw => true,
            FinetuneOptimizer::SgdNesterov => false,
        };
        let kind = if adamw {
            OptimizerKind::adamw(f.weight_decay)
        } else {
            OptimizerKind::SgdNesterov {
                momentum: f.momentum,
                weight_decay: 0.0,
            }
        };
        let schedule = if adamw && f.cosine {
            LrSchedule::CosineRestarts {
                base_lr: f.lr,
                initial_budget: f.restart_budget,
                budget_multiplier: f.restart_multiplier,
            }
        } else {
            LrSchedule::Constant { base_lr: f.lr }
        };
        (kind, schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[data]
kind = "synthetic"
synthetic = { kind = "gaussian", n_samples = 100, n_features = 4, n_informative = 2, seed = 1 }

[model]
arch = "mlp"
hidden = [8, 8]
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.prune.ratio, 8.0);
        assert_eq!(cfg.init.kappa, 0.25);
        assert_eq!(cfg.objective.lambda, 1.0);
        assert_eq!(cfg.pretrain.epochs, 60);
        assert_eq!(cfg.finetune.epochs, 45);
        assert_eq!(cfg.data.split, SplitSpec::default());
        let (kind, schedule) = cfg.finetune_optimizer();
        assert!(matches!(kind, OptimizerKind::AdamW { .. }));
        assert_eq!(schedule.lr(15), 0.001);
        assert_eq!(cfg.transform_set().unwrap(), TransformSet::scarf_default());
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{MINIMAL}\n[prune]\nratio = 4.0\nratoi = 2.0\n");
        assert!(ExperimentConfig::from_toml(&text).unwrap_err().is_config());
    }

    #[test]
    fn invalid_values_name_their_key() {
        let text = format!("{MINIMAL}\n[prune]\nratio = 0.5\n");
        match ExperimentConfig::from_toml(&text) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "prune.ratio"),
            other => panic!("{other:?}"),
        }
        let text = format!("{MINIMAL}\n[init]\nkappa = -1.0\n");
        match ExperimentConfig::from_toml(&text) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "init.kappa"),
            other => panic!("{other:?}"),
        }
        let text =
            format!("{MINIMAL}\n[objective]\ntransforms = [{{ kind = \"grayscale\", p = 0.5 }}]\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }
}
