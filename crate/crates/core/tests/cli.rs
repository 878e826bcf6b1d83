use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny.toml")
}

fn invprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_invprune"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_tiny(out: &Path) -> Output {
    let o = invprune(&[
        "run",
        "--config",
        tiny().to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    o
}

#[test]
fn run_writes_manifest_with_overridden_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_tiny(dir.path());
    assert!(stdout(&o).contains("consistency[feature_corrupt]"));
    let manifest = std::fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
    let value: toml::Table = manifest.parse().unwrap();
    assert_eq!(value["seed"].as_integer(), Some(3), "{manifest}");
    assert_eq!(value["config"]["seed"].as_integer(), Some(3));
    assert!(dir.path().join("metrics.csv").exists());
}

#[test]
fn missing_config_exits_one_and_names_the_path() {
    let o = invprune(&["run", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("/nonexistent/cfg.toml"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn unknown_key_exits_one_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nbogus_key = 3\n").unwrap();
    let o = invprune(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus_key"), "{}", stderr(&o));
}

#[test]
fn invalid_override_exits_one() {
    let o = invprune(&[
        "train",
        "--config",
        tiny().to_str().unwrap(),
        "--ratio",
        "0.5",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("prune.ratio"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(invprune(&["run"]).status.code(), Some(1));
    assert_eq!(invprune(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(invprune(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = invprune(&[
        "eval",
        "--config",
        tiny().to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--checkpoint",
        dir.path().join("nope.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.ckpt"));
}

#[test]
fn eval_reports_both_consistency_figures() {
    let dir = tempfile::tempdir().unwrap();
    run_tiny(dir.path());
    let ckpt = dir.path().join("checkpoints/final.ckpt");
    let o = invprune(&[
        "eval",
        "--config",
        tiny().to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--metric",
        "consistency",
        "--transform",
        "feature_corrupt",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(
        text.contains("unchanged") && text.contains("flip"),
        "{text}"
    );
    assert!(!text.contains("accuracy"));

    let o = invprune(&[
        "eval",
        "--config",
        tiny().to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--transform",
        "rotate",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn staged_commands_chain_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let base = [
        "--config",
        tiny().to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]
    .map(String::from);
    let step = |cmd: &str| {
        let mut args = vec![cmd.to_string()];
        args.extend(base.iter().cloned());
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = invprune(&args);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        o
    };
    step("train");
    assert!(dir.path().join("checkpoints/supernet.ckpt").exists());
    let o = step("prune");
    assert!(stdout(&o).contains("kept"));
    assert!(dir.path().join("checkpoints/reinit.ckpt").exists());
    step("finetune");
    assert!(dir.path().join("checkpoints/final.ckpt").exists());
    step("export-histograms");
    assert!(dir.path().join("exports/final_histogram.csv").exists());
    assert!(dir.path().join("exports/final_first_layer.csv").exists());
}

#[test]
fn ablate_and_sweep_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = tiny();
    let o = invprune(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out,
        "--arm",
        "dense",
        "--arm",
        "full",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(dir.path().join("dense").is_dir() && dir.path().join("full").is_dir());

    let o = invprune(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out,
        "--arm",
        "nonsense",
    ]);
    assert_eq!(o.status.code(), Some(1));

    let o = invprune(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("sweep.csv").exists());
}
