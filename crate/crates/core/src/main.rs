use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use invprune::eval::{first_layer_magnitudes, weight_histogram, write_grid_csv};
use invprune::nn::load_checkpoint;
use invprune::pipeline::config::Precision;
use invprune::pipeline::{
    finetune, prepare_data, prune_and_reinit, run_ablation, run_supernet, run_sweep, run_to_dir,
    write_sweep, Arm, ExperimentConfig, RunContext,
};
use invprune::prune::sparsity_report;
use invprune::{Error, Scalar};

#[derive(Parser)]
#[command(
    name = "invprune",
    version,
    about = "Invariance-preserving subnetwork discovery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the compression ratio.
    #[arg(long)]
    ratio: Option<f64>,
    /// Overrides the initialization multiplier.
    #[arg(long)]
    kappa: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    All,
    Accuracy,
    BalancedAccuracy,
    Consistency,
}

#[derive(Subcommand)]
enum Command {
    /// Train the supernetwork.
    Train(Common),
    /// Prune a trained supernetwork and write the reinitialized subnetwork.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Supernetwork checkpoint; defaults to `<out>/checkpoints/supernet.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune a reinitialized subnetwork.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoints/reinit.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Full pipeline with a manifest.
    Run(Common),
    /// Ablation arms, each in its own subdirectory.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Arms to run (default: all).
        #[arg(long = "arm")]
        arms: Vec<String>,
    },
    /// Grid over arms, ratios, kappas and seeds from the config's `[sweep]` table.
    Sweep(Common),
    /// Metrics of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        metric: Metric,
        /// Restricts consistency to one transform.
        #[arg(long)]
        transform: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Weight-magnitude histogram and first-layer grid of a checkpoint.
    ExportHistograms {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoints/final.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train(c) | Command::Run(c) | Command::Sweep(c) => c,
            Command::Prune { common, .. }
            | Command::Finetune { common, .. }
            | Command::Ablate { common, .. }
            | Command::Eval { common, .. }
            | Command::ExportHistograms { common, .. } => common,
        }
    }
}

fn load_config(c: &Common) -> invprune::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::from_file(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(r) = c.ratio {
        cfg.prune.ratio = r;
    }
    if let Some(k) = c.kappa {
        cfg.init.kappa = k;
    }
    if let Some(o) = &c.out {
        cfg.output.dir = o.clone();
    }
    cfg.validate()?;
    let out = cfg.output.dir.clone();
    Ok((cfg, out))
}

fn execute<T: Scalar>(cmd: &Command, cfg: ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    match cmd {
        Command::Train(_) => {
            let data = Arc::new(prepare_data(&cfg)?);
            let mut ctx = RunContext::<T>::new(cfg, data, Some(out))?;
            let s = run_supernet(&mut ctx).context("phase pretrain")?;
            println!(
                "supernetwork trained: l_sup {:.6}, l_nce {:.6}, {} contrastive batches",
                s.last_loss.l_sup, s.last_loss.l_nce, s.contrastive_batches
            );
            println!(
                "checkpoint: {}",
                out.join("checkpoints/supernet.ckpt").display()
            );
        }
        Command::Prune { checkpoint, .. } => {
            let path = checkpoint
                .clone()
                .unwrap_or_else(|| out.join("checkpoints/supernet.ckpt"));
            let supernet = load_checkpoint::<T>(&path)
                .with_context(|| format!("loading {}", path.display()))?;
            let data = Arc::new(prepare_data(&cfg)?);
            let mut ctx = RunContext::<T>::new(cfg, data, Some(out))?;
            let (mask, reinit) = prune_and_reinit(&mut ctx, &supernet).context("phase prune")?;
            let rep = sparsity_report(&reinit);
            println!(
                "kept {} of {} prunable weights (ratio {:.4}, target {})",
                rep.kept_count,
                rep.prunable_count,
                rep.achieved_ratio,
                mask.target_ratio()
            );
            println!(
                "checkpoint: {}",
                out.join("checkpoints/reinit.ckpt").display()
            );
        }
        Command::Finetune { checkpoint, .. } => {
            let path = checkpoint
                .clone()
                .unwrap_or_else(|| out.join("checkpoints/reinit.ckpt"));
            let model = load_checkpoint::<T>(&path)
                .with_context(|| format!("loading {}", path.display()))?;
            let data = Arc::new(prepare_data(&cfg)?);
            let image = cfg.is_image();
            let mut ctx = RunContext::<T>::new(cfg, data, Some(out))?;
            let (_, m) = finetune(&mut ctx, model).context("phase finetune")?;
            println!("test {}: {:.4}", headline_name(image), m.headline(image));
        }
        Command::Run(_) => {
            let image = cfg.is_image();
            let (outcome, _) = run_to_dir::<T>(&cfg, out)?;
            println!(
                "test {}: {:.4}",
                headline_name(image),
                outcome.metrics.headline(image)
            );
            for (name, c) in &outcome.metrics.test.consistency {
                println!(
                    "consistency[{name}]: unchanged {:.4}% flip {:.4}%",
                    c.unchanged, c.flipped
                );
            }
            println!("manifest: {}", out.join("manifest.toml").display());
        }
        Command::Ablate { arms, .. } => {
            let arms: Vec<Arm> = if arms.is_empty() {
                Arm::ALL.to_vec()
            } else {
                arms.iter()
                    .map(|a| {
                        Arm::parse(a)
                            .ok_or_else(|| Error::config("--arm", format!("unknown arm `{a}`")))
                    })
                    .collect::<Result<_, _>>()?
            };
            let data = Arc::new(prepare_data(&cfg)?);
            let mut table = String::from(
                "arm,seed,kept_weights,prunable_weights,test_accuracy,test_balanced_accuracy\n",
            );
            for arm in arms {
                let r = run_ablation::<T>(&cfg, data.clone(), arm, Some(&out.join(arm.name())))
                    .with_context(|| format!("arm {}", arm.name()))?;
                println!(
                    "{:<13} test accuracy {:.4}  balanced accuracy {:.4}",
                    arm.name(),
                    r.metrics.test.accuracy,
                    r.metrics.test.balanced_accuracy
                );
                table.push_str(&format!(
                    "{},{},{},{},{:.6},{:.6}\n",
                    arm.name(),
                    r.seed,
                    r.kept_weights,
                    r.prunable_weights,
                    r.metrics.test.accuracy,
                    r.metrics.test.balanced_accuracy
                ));
            }
            let p = out.join("ablation.csv");
            std::fs::write(&p, table).with_context(|| format!("writing {}", p.display()))?;
        }
        Command::Sweep(_) => {
            let data = Arc::new(prepare_data(&cfg)?);
            let (rows, summary) = run_sweep::<T>(&cfg, data)?;
            write_sweep(&rows, &summary, out)?;
            for s in &summary {
                println!(
                    "{:<13} r={:<5} kappa={:<7} valid {:.4} ± {:.4}  test {:.4} ± {:.4}",
                    s.arm.name(),
                    s.ratio,
                    s.kappa,
                    s.valid_mean,
                    s.valid_std,
                    s.test_mean,
                    s.test_std
                );
            }
        }
        Command::Eval {
            checkpoint,
            metric,
            transform,
            split,
            ..
        } => {
            let model = load_checkpoint::<T>(checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let data = Arc::new(prepare_data(&cfg)?);
            data.split(split)?;
            let mut ctx = RunContext::<T>::new(cfg, data, None)?;
            if let Some(t) = transform {
                ctx.augmenter = ctx.augmenter.restricted(t).ok_or_else(|| {
                    Error::config(
                        "--transform",
                        format!("`{t}` is not in the transform family"),
                    )
                })?;
            }
            let want_consistency = matches!(metric, Metric::All | Metric::Consistency);
            let r = if want_consistency {
                ctx.full_metrics(&model, split, "eval", 0)?
            } else {
                ctx.quick_metrics(&model, split, "eval", 0, None)?
            };
            if matches!(metric, Metric::All | Metric::Accuracy) {
                println!("accuracy: {:.4}", r.accuracy);
            }
            if matches!(metric, Metric::All | Metric::BalancedAccuracy) {
                println!("balanced_accuracy: {:.4}", r.balanced_accuracy);
            }
            for (name, c) in &r.consistency {
                println!(
                    "consistency[{name}]: unchanged {:.4}% flip {:.4}%",
                    c.unchanged, c.flipped
                );
            }
        }
        Command::ExportHistograms { checkpoint, .. } => {
            let path = checkpoint
                .clone()
                .unwrap_or_else(|| out.join("checkpoints/final.ckpt"));
            let model = load_checkpoint::<T>(&path)
                .with_context(|| format!("loading {}", path.display()))?;
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("model")
                .to_string();
            let dir = out.join("exports");
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let h = weight_histogram(&model, cfg.eval.histogram_bins, 0)?;
            let hp = dir.join(format!("{stem}_histogram.csv"));
            h.write_csv(&hp)?;
            let gp = dir.join(format!("{stem}_first_layer.csv"));
            write_grid_csv(&first_layer_magnitudes(&model)?, &gp)?;
            println!("histogram: {}", hp.display());
            println!("first layer: {}", gp.display());
        }
    }
    Ok(())
}

fn headline_name(image: bool) -> &'static str {
    if image {
        "accuracy"
    } else {
        "balanced accuracy"
    }
}

fn real_main(cli: Cli) -> anyhow::Result<()> {
    let (cfg, out) = load_config(cli.command.common())?;
    if out.as_os_str().is_empty() {
        bail!(Error::config("output.dir", "must not be empty"));
    }
    match cfg.train.precision {
        Precision::F32 => execute::<f32>(&cli.command, cfg, &out),
        Precision::F64 => execute::<f64>(&cli.command, cfg, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e
                .chain()
                .any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_config));
            ExitCode::from(if config { 1 } else { 2 })
        }
    }
}
