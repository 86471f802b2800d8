//! End-to-end tests of the `corruptlab` binary: every verb is exercised
//! against a micro configuration that runs in well under a second.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use corruptlab::tinylm::ModelConfig;
use corruptlab::tokens::vocab;
use corruptlab_harness::config::{Experiment, ExperimentConfig, Strategy};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_corruptlab"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawning the binary");
    assert!(
        out.status.success(),
        "`corruptlab {}` failed:\nstdout: {}\nstderr: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

fn micro_config(dir: &Path, experiment: Experiment) -> (PathBuf, ExperimentConfig) {
    let mut cfg = ExperimentConfig::default_for(experiment);
    cfg.seeds = vec![1];
    cfg.model = ModelConfig {
        vocab_size: vocab().size(),
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq: 48,
    };
    cfg.pretrain.n_samples = 24;
    cfg.pretrain.hyper.steps = 3;
    cfg.pretrain.hyper.batch_size = 8;
    cfg.sft.n_samples = 30;
    cfg.sft.hyper.steps = 3;
    cfg.sft.hyper.batch_size = 8;
    cfg.bench.per_group = 4;
    cfg.prune.probe_samples = 10;
    cfg.prune.grid = vec![(50.0, 40.0)];
    cfg.grids.e1_crs = vec![0.0, 0.5];
    cfg.grids.e4_crs = vec![0.5];
    cfg.grids.e5_strategies = vec![Strategy::Ce];
    cfg.out_dir = dir.join("run");
    let path = dir.join("micro.toml");
    std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    (path, cfg)
}

#[test]
fn init_config_prints_a_parseable_default() {
    let out = run_ok(&["init-config", "E4"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    assert_eq!(cfg.experiment, Experiment::E4Detect);
}

#[test]
fn gen_data_writes_the_three_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let (config, cfg) = micro_config(dir.path(), Experiment::E1Sweep);
    let out = run_ok(&["gen-data", "--config", config.to_str().unwrap()]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 3, "one line per corpus: {stdout}");
    for stem in ["pretrain_s1", "sft_cr60_uniform_corrupted_s1", "bench_s1"] {
        assert!(
            cfg.out_dir.join("corpora").join(format!("{stem}.jsonl")).is_file(),
            "missing corpus {stem}"
        );
    }
}

#[test]
fn evaluate_runs_the_pipeline_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let (config, cfg) = micro_config(dir.path(), Experiment::E1Sweep);
    let out = run_ok(&["evaluate", "--config", config.to_str().unwrap()]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("mean:"), "stdout: {stdout}");
    assert!(cfg
        .out_dir
        .join("reports/eval_sft_cr60_uniform_corrupted_s1.json")
        .is_file());
}

#[test]
fn experiment_then_report_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (config, cfg) = micro_config(dir.path(), Experiment::E1Sweep);
    run_ok(&["experiment", "E1", "--config", config.to_str().unwrap()]);
    let results = cfg.out_dir.join("reports/results.csv");
    let plot = cfg.out_dir.join("plots/e1_accuracy.csv");
    let first = (std::fs::read(&results).unwrap(), std::fs::read(&plot).unwrap());
    // 2 crs × 2 variants = 4 data rows.
    assert_eq!(String::from_utf8_lossy(&first.0).lines().count(), 5);

    run_ok(&["report", "--config", config.to_str().unwrap()]);
    let second = (std::fs::read(&results).unwrap(), std::fs::read(&plot).unwrap());
    assert_eq!(second, first, "re-rendering must be byte-identical");
}

#[test]
fn seed_override_names_artifacts_by_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (config, cfg) = micro_config(dir.path(), Experiment::E1Sweep);
    run_ok(&["pretrain", "--config", config.to_str().unwrap(), "--seed", "7"]);
    assert!(cfg.out_dir.join("checkpoints/pretrain_s7.tlmb").is_file());
}

#[test]
fn failures_exit_nonzero_with_a_stage_message() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "experiment = \"E1_sweep\"\n").unwrap();
    let out = bin()
        .args(["pretrain", "--config", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.starts_with("error:"), "stderr: {stderr}");

    // Unknown experiment names are rejected at parse time.
    let out = bin().args(["experiment", "E9"]).output().unwrap();
    assert!(!out.status.success());
}
