use std::path::Path;
use std::sync::Arc;

use crate::error::Result;
use crate::nn::ModelState;
use crate::pipeline::config::ExperimentConfig;
use crate::pipeline::run::{
    finetune, run_prune_finetune, run_supernet, FinalMetrics, PreparedData, RunContext,
};
use crate::prune::{pis_init, sparsity_report, InitSpec, PruneMask};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    /// Dense network, plain supervised training under the fine-tuning recipe.
    Dense,
    Full,
    NoPrune,
    NoIlo,
    NoPis,
    /// Supervised supernetwork at kappa 1, pruned, reinitialized, fine-tuned.
    OmpBaseline,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::Dense,
        Arm::Full,
        Arm::NoPrune,
        Arm::NoIlo,
        Arm::NoPis,
        Arm::OmpBaseline,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arm::Dense => "dense",
            Arm::Full => "full",
            Arm::NoPrune => "no_prune",
            Arm::NoIlo => "no_ilo",
            Arm::NoPis => "no_pis",
            Arm::OmpBaseline => "omp_baseline",
        }
    }

    /// The configuration this arm actually runs.
    pub fn configure(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            Arm::Full => {}
            Arm::NoPrune => c.prune.ratio = 1.0,
            Arm::NoIlo => c.objective.lambda = 0.0,
            Arm::NoPis => c.init.kappa = 1.0,
            Arm::OmpBaseline | Arm::Dense => {
                c.objective.lambda = 0.0;
                c.init.kappa = 1.0;
            }
        }
        if *self == Arm::Dense {
            c.prune.ratio = 1.0;
        }
        c
    }

    pub fn has_supernet(&self) -> bool {
        *self != Arm::Dense
    }
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub metrics: FinalMetrics,
    pub kept_weights: usize,
    pub prunable_weights: usize,
    pub contrastive_batches: usize,
    pub mask: Option<PruneMask>,
}

/// Runs one arm. A supplied supernetwork (trained under the same arm
/// configuration) skips the pre-pruning stage.
pub fn run_arm_with<T: Scalar>(
    cfg: &ExperimentConfig,
    data: Arc<PreparedData>,
    arm: Arm,
    out_dir: Option<&Path>,
    supernet: Option<&ModelState<T>>,
) -> Result<(ArmResult, Option<ModelState<T>>)> {
    let arm_cfg = arm.configure(cfg);
    let seed = arm_cfg.seed;
    let mut ctx = RunContext::<T>::new(arm_cfg, data, out_dir)?;
    if arm == Arm::Dense {
        let init = InitSpec {
            scheme: ctx.cfg.init.scheme,
            kappa: 1.0,
            seed,
        };
        let model = pis_init::<T>(&ctx.spec, init)?;
        let (final_model, metrics) = finetune(&mut ctx, model)?;
        let rep = sparsity_report(&final_model);
        return Ok((
            ArmResult {
                arm,
                seed,
                metrics,
                kept_weights: rep.kept_count,
                prunable_weights: rep.prunable_count,
                contrastive_batches: 0,
                mask: None,
            },
            None,
        ));
    }
    let (model, contrastive_batches) = match supernet {
        Some(m) => (m.clone(), 0),
        None => {
            let s = run_supernet(&mut ctx)?;
            (s.model, s.contrastive_batches)
        }
    };
    let (mask, _, final_model, metrics) = run_prune_finetune(&mut ctx, &model)?;
    let rep = sparsity_report(&final_model);
    Ok((
        ArmResult {
            arm,
            seed,
            metrics,
            kept_weights: rep.kept_count,
            prunable_weights: rep.prunable_count,
            contrastive_batches,
            mask: Some(mask),
        },
        Some(model),
    ))
}

pub fn run_ablation<T: Scalar>(
    cfg: &ExperimentConfig,
    data: Arc<PreparedData>,
    arm: Arm,
    out_dir: Option<&Path>,
) -> Result<ArmResult> {
    Ok(run_arm_with::<T>(cfg, data, arm, out_dir, None)?.0)
}
