use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::ModelState;
use crate::pipeline::ablation::{run_arm_with, Arm, ArmResult};
use crate::pipeline::config::ExperimentConfig;
use crate::pipeline::run::PreparedData;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub arm: Arm,
    pub ratio: f64,
    pub kappa: f64,
    pub seed: u64,
    pub valid_accuracy: f64,
    pub valid_balanced_accuracy: f64,
    pub test_accuracy: f64,
    pub test_balanced_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub arm: Arm,
    pub ratio: f64,
    pub kappa: f64,
    pub runs: usize,
    pub valid_mean: f64,
    pub valid_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn key(cfg: &ExperimentConfig) -> (u64, u64, u64) {
    (
        cfg.objective.lambda.to_bits(),
        cfg.init.kappa.to_bits(),
        cfg.seed,
    )
}

/// Cross product of arms, ratios, kappas and seeds, one row each, in that
/// nesting order. Supernetworks are shared between ratios and identical
/// effective configurations are computed once.
pub fn run_sweep<T: Scalar>(
    cfg: &ExperimentConfig,
    data: Arc<PreparedData>,
) -> Result<(Vec<SweepRow>, Vec<SweepSummary>)> {
    let sw = &cfg.sweep;
    let arms: Vec<Arm> = sw
        .arms
        .iter()
        .map(|a| {
            Arm::parse(a).ok_or_else(|| Error::config("sweep.arms", format!("unknown arm `{a}`")))
        })
        .collect::<Result<_>>()?;
    let mut supernets: BTreeMap<(u64, u64, u64), ModelState<T>> = BTreeMap::new();
    let mut results: BTreeMap<(bool, u64, u64, u64, u64), ArmResult> = BTreeMap::new();
    let mut rows = Vec::new();
    for &arm in &arms {
        for &ratio in &sw.ratios {
            for &kappa in &sw.kappas {
                for &seed in &sw.seeds {
                    let mut c = cfg.clone();
                    c.prune.ratio = ratio;
                    c.init.kappa = kappa;
                    c.seed = seed;
                    let eff = arm.configure(&c);
                    let (l, k, s) = key(&eff);
                    let rkey = (arm == Arm::Dense, l, k, eff.prune.ratio.to_bits(), s);
                    if let Entry::Vacant(slot) = results.entry(rkey) {
                        let cached = supernets.get(&(l, k, s)).cloned();
                        let (res, net) =
                            run_arm_with::<T>(&c, data.clone(), arm, None, cached.as_ref())?;
                        if let (Some(net), true) = (net, arm.has_supernet()) {
                            supernets.entry((l, k, s)).or_insert(net);
                        }
                        slot.insert(res);
                    }
                    let m = &results[&rkey].metrics;
                    rows.push(SweepRow {
                        arm,
                        ratio,
                        kappa,
                        seed,
                        valid_accuracy: m.valid.accuracy,
                        valid_balanced_accuracy: m.valid.balanced_accuracy,
                        test_accuracy: m.test.accuracy,
                        test_balanced_accuracy: m.test.balanced_accuracy,
                    });
                }
            }
        }
    }
    let image = cfg.is_image();
    let pick_valid = |r: &SweepRow| {
        if image {
            r.valid_accuracy
        } else {
            r.valid_balanced_accuracy
        }
    };
    let pick_test = |r: &SweepRow| {
        if image {
            r.test_accuracy
        } else {
            r.test_balanced_accuracy
        }
    };
    let mut summary = Vec::new();
    for &arm in &arms {
        for &ratio in &sw.ratios {
            for &kappa in &sw.kappas {
                let group: Vec<&SweepRow> = rows
                    .iter()
                    .filter(|r| r.arm == arm && r.ratio == ratio && r.kappa == kappa)
                    .collect();
                let (valid_mean, valid_std) =
                    mean_std(&group.iter().map(|r| pick_valid(r)).collect::<Vec<_>>());
                let (test_mean, test_std) =
                    mean_std(&group.iter().map(|r| pick_test(r)).collect::<Vec<_>>());
                summary.push(SweepSummary {
                    arm,
                    ratio,
                    kappa,
                    runs: group.len(),
                    valid_mean,
                    valid_std,
                    test_mean,
                    test_std,
                });
            }
        }
    }
    Ok((rows, summary))
}

pub fn write_sweep(rows: &[SweepRow], summary: &[SweepSummary], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let f = |v: f64| format!("{v:.6}");
    let mut out = String::from(
        "arm,ratio,kappa,seed,valid_accuracy,valid_balanced_accuracy,test_accuracy,test_balanced_accuracy\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.arm.name(),
            r.ratio,
            r.kappa,
            r.seed,
            f(r.valid_accuracy),
            f(r.valid_balanced_accuracy),
            f(r.test_accuracy),
            f(r.test_balanced_accuracy)
        ));
    }
    let p = dir.join("sweep.csv");
    std::fs::write(&p, out).map_err(|e| Error::io(&p, e))?;
    let mut out = String::from("arm,ratio,kappa,runs,valid_mean,valid_std,test_mean,test_std\n");
    for s in summary {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.arm.name(),
            s.ratio,
            s.kappa,
            s.runs,
            f(s.valid_mean),
            f(s.valid_std),
            f(s.test_mean),
            f(s.test_std)
        ));
    }
    let p = dir.join("sweep_summary.csv");
    std::fs::write(&p, out).map_err(|e| Error::io(&p, e))
}
