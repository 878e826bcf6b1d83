//! End-to-end orchestration: supernetwork training, pruning, reinit,
//! fine-tuning, ablation arms and sweeps.

pub mod ablation;
pub mod config;
pub mod manifest;
pub mod run;
pub mod sweep;

pub use ablation::{run_ablation, run_arm_with, Arm, ArmResult};
pub use config::ExperimentConfig;
pub use manifest::{config_hash, RunManifest};
pub use run::{
    build_augmenter, build_spec, finetune, prepare_data, prune_and_reinit, run_pipeline,
    run_prune_finetune, run_supernet, FinalMetrics, PipelineOutcome, PreparedData, RunContext,
    SupernetOutcome,
};
pub use sweep::{run_sweep, write_sweep, SweepRow, SweepSummary};

use std::path::Path;
use std::sync::Arc;

use crate::error::Result;
use crate::scalar::Scalar;

/// Runs the full pipeline into `out_dir` and writes the manifest.
pub fn run_to_dir<T: Scalar>(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(PipelineOutcome<T>, RunManifest)> {
    let data = Arc::new(prepare_data(cfg)?);
    let mut ctx = RunContext::<T>::new(cfg.clone(), data, Some(out_dir))?;
    let outcome = run_pipeline(&mut ctx)?;
    let mut manifest = RunManifest::new(cfg);
    for (name, path) in ctx.artifacts() {
        manifest.add_file(name, path, out_dir);
    }
    manifest.wall_clock_seconds = ctx.timings().clone();
    let m = &outcome.metrics;
    manifest
        .results
        .insert("test_accuracy".into(), m.test.accuracy);
    manifest
        .results
        .insert("test_balanced_accuracy".into(), m.test.balanced_accuracy);
    manifest
        .results
        .insert("valid_accuracy".into(), m.valid.accuracy);
    manifest
        .results
        .insert("valid_balanced_accuracy".into(), m.valid.balanced_accuracy);
    manifest
        .results
        .insert("achieved_ratio".into(), outcome.mask.achieved_ratio());
    for (name, c) in &m.test.consistency {
        manifest
            .results
            .insert(format!("test_consistency_{name}"), c.unchanged);
    }
    manifest.write(out_dir)?;
    Ok((outcome, manifest))
}
