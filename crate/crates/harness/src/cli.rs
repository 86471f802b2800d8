//! Command-line interface. Stage verbs run the pipeline through their stage
//! for a single seed (rebuilding upstream artifacts deterministically);
//! `experiment` runs a full multi-seed experiment and renders reports.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use corruptlab::synthworld::{Corpus, Sample, Variant};
use corruptlab::tinylm::ModelState;

use crate::config::{Experiment, ExperimentConfig, LnlMethod};
use crate::eval::evaluate;
use crate::experiments::run_experiment;
use crate::pipeline::{
    bench_spec, further_ft_run, gen_corpus, importance_run, lnl_train_run, pretrain_run,
    pretrain_spec, probe_corpus, prune_point, score_run, seed_stem, select_run, sft_run, sft_spec,
    sft_stem, stage, RunDirs,
};
use crate::report::{read_rows_jsonl, render_reports};

#[derive(Parser)]
#[command(
    name = "corruptlab",
    version,
    about = "Data-corruption experiments on a tiny from-scratch language model"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every verb that executes pipeline stages.
#[derive(Args)]
struct Common {
    /// Config TOML; defaults to the built-in configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed (stage verbs always use a single seed; the first
    /// configured seed when unset).
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print (or write) the default config for an experiment.
    InitConfig {
        experiment: Experiment,
        /// Write to this path instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the pre-training, fine-tuning, and benchmark corpora.
    GenData(Common),
    /// Pre-train the base model on the captioning/verdict mix.
    Pretrain(Common),
    /// Fine-tune the pre-trained model on the (corrupted) corpus.
    Sft(Common),
    /// Score every fine-tuning sample with each configured score.
    Score(Common),
    /// Keep the cleanest fraction under the configured selection score.
    Select(Common),
    /// Isolate corruption-important weights and disable them.
    Prune(Common),
    /// Fine-tune with online small-loss selection.
    LnlTrain(Common),
    /// Further fine-tune the fine-tuned model on the selected subset.
    FurtherFt(Common),
    /// Evaluate the fine-tuned model on the held-out benchmark.
    Evaluate(Common),
    /// Run a full experiment (E1..E5) over all configured seeds.
    Experiment {
        name: Experiment,
        #[command(flatten)]
        common: Common,
    },
    /// Re-render reports and plot tables from the recorded rows.
    Report(Common),
}

/// Parses arguments, dispatches, and maps failures to exit code 1.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::InitConfig { experiment, out } => cmd_init_config(experiment, out),
        Command::GenData(c) => cmd_gen_data(&resolve(&c, None)?),
        Command::Pretrain(c) => cmd_pretrain(&resolve(&c, None)?),
        Command::Sft(c) => cmd_sft(&resolve(&c, None)?),
        Command::Score(c) => cmd_score(&resolve(&c, None)?),
        Command::Select(c) => cmd_select(&resolve(&c, None)?),
        Command::Prune(c) => cmd_prune(&resolve(&c, None)?),
        Command::LnlTrain(c) => cmd_lnl_train(&resolve(&c, None)?),
        Command::FurtherFt(c) => cmd_further_ft(&resolve(&c, None)?),
        Command::Evaluate(c) => cmd_evaluate(&resolve(&c, None)?),
        Command::Experiment { name, common } => {
            let cfg = resolve(&common, Some(name))?;
            let rows = run_experiment(&cfg)?;
            println!("{} evaluated models -> {}", rows.len(), cfg.out_dir.display());
            Ok(())
        }
        Command::Report(c) => cmd_report(&resolve(&c, None)?),
    }
}

/// Loads the config (or defaults), applies CLI overrides, validates.
fn resolve(common: &Common, experiment: Option<Experiment>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default_for(experiment.unwrap_or(Experiment::E1Sweep)),
    };
    if let Some(e) = experiment {
        cfg.experiment = e;
        if common.config.is_none() && common.out.is_none() {
            // Keep the default per-experiment directory when nothing is set.
            cfg.out_dir = ExperimentConfig::default_for(e).out_dir;
        }
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_init_config(experiment: Experiment, out: Option<PathBuf>) -> Result<()> {
    let text = ExperimentConfig::default_for(experiment).to_toml_string()?;
    match out {
        Some(path) => {
            std::fs::write(&path, text)
                .with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage verbs (single seed)
// ---------------------------------------------------------------------------

fn stage_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

/// The corrupted fine-tuning corpus stem for the standalone verbs.
fn corrupted_stem(cfg: &ExperimentConfig, seed: u64) -> String {
    seed_stem(&sft_stem(cfg.sft.cr, cfg.sft.targeting, Variant::Corrupted), seed)
}

fn build_sft_corpus(cfg: &ExperimentConfig, dirs: &RunDirs, seed: u64) -> Result<Corpus> {
    let spec = sft_spec(cfg, seed, cfg.sft.cr, cfg.sft.targeting, Variant::Corrupted);
    stage("gen-data", || gen_corpus(dirs, &spec, &corrupted_stem(cfg, seed)))
}

/// Pipeline through the SFT stage: pre-train, build the corpus, fine-tune.
fn sft_pipeline(
    cfg: &ExperimentConfig,
    dirs: &RunDirs,
    seed: u64,
) -> Result<(String, Corpus, ModelState)> {
    let base = stage("pretrain", || pretrain_run(cfg, dirs, seed, false))?;
    let corpus = build_sft_corpus(cfg, dirs, seed)?;
    let stem = corrupted_stem(cfg, seed);
    let model =
        stage("sft", || sft_run(cfg, dirs, &base, &corpus, &cfg.objective, seed, &stem))?;
    Ok((stem, corpus, model))
}

fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let dirs = RunDirs::create(&cfg.out_dir)?;
    let seed = stage_seed(cfg);
    let pre_stem = seed_stem("pretrain", seed);
    let pre = stage("gen-data", || gen_corpus(&dirs, &pretrain_spec(cfg, seed), &pre_stem))?;
    let sft = build_sft_corpus(cfg, &dirs, seed)?;
    let bench_stem = seed_stem("bench", seed);
    let bench = stage("gen-data", || gen_corpus(&dirs, &bench_spec(cfg, seed), &bench_stem))?;
    for (name, corpus) in [(&pre_stem, &pre), (&corrupted_stem(cfg, seed), &sft), (&bench_stem, &bench)] {
        println!(
            "{}: {} samples, id {}",
            dirs.corpus_path(name).display(),
            corpus.samples.len(),
            corpus.id()
        );
    }
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let dirs = RunDirs::create(&cfg.out_dir)?;
    let seed = stage_seed(cfg);
    let model = stage("pretrain", || pretrain_run(cfg, &dirs, seed, false))?;
    let stem = seed_stem("pretrain", seed);
    println!("{}: id {}", dirs.checkpoint_path(&stem).display(), model.content_id());
    Ok(())
}

fn cmd_sft(cfg: &ExperimentConfig) -> Result<()> {
    let dirs = RunDirs::create(&cfg.out_dir)?;
    let seed = stage_seed(cfg);
    let (stem, _, model) = sft_pipeline(cfg, &dirs, seed)?;
    println!("{}: id {}", dirs.checkpoint_path(&stem).display(), model.content_id());
    Ok(())
}

fn score_prior(cfg: &ExperimentConfig, kind: corruptlab::scoring::ScoreKind) -> Option<f64> {
    matches!(kind, corruptlab::scoring::ScoreKind::Posterior).then_some(cfg.sft.cr)
}

fn cmd_score(cfg: &ExperimentConfig) -> Result<()> {
    let dirs = RunDirs::create(&cfg.out_dir)?;
    let seed = stage_seed(cfg);
    let (stem, corpus, model) = sft_pipeline(cfg, &dirs, seed)?;
    for &kind in &cfg.score_kinds {
        stage("score", || {
            score_run(&dirs, &model, &corpus, kind, score_prior(cfg, kind), &stem)
        })?;
        println!("{}", dirs.scores_path(&stem, kind).display());
    }
    Ok(())
}

fn cmd_select(cfg: &ExperimentConfig) -> Result<()> {
    let dirs = RunDirs::create(&cfg.out_dir)?;
    let seed = stage_seed(cfg);
    let (stem, corpus, model) = sft_pipeline(cfg, &dirs, seed)?;
    let kind = cfg.selection.score;
    let records =
        stage("score", || score_run(&dirs, &model, &corpus, kind, score_prior(cfg, kind), &stem))?;
    let selection = stage("select", || {
        select_run(&dirs, &records, &corpus, cfg.selection.keep_fraction, &stem)
    })?;
    println!(
        "{}: kept {} of {}",
        dirs.selection_path(&stem, kind).display(),
        selection.kept_ids.len(),
        corpus.samples.len()
    );
    Ok(())
}

fn cmd_prune(cfg: &ExperimentConfig) -> Result<()> {
    let dirs = RunDirs::create(&cfg.out_dir)?;
    let seed = stage_seed(cfg);
    let base = stage("pretrain", || pretrain_run(cfg, &dirs, seed, false))?;

    let (_, noisy_corpus, noisy_model) = sft_pipeline(cfg, &dirs, seed)?;
    let clean_stem = seed_stem(&sft_stem(0.0, cfg.sft.targeting, Variant::Corrupted), seed);
    let clean_spec = sft_spec(cfg, seed, 0.0, cfg.sft.targeting, Variant::Corrupted);
    let clean_corpus = stage("gen-data", || gen_corpus(&dirs, &clean_spec, &clean_stem))?;
    let clean_model = stage("sft", || {
        sft_run(cfg, &dirs, &base, &clean_corpus, &cfg.objective, seed, &clean_stem)
    })?;

    let probe_noisy = probe_corpus(&noisy_corpus, cfg.prune.probe_samples, |s| !s.is_clean());
    let probe_clean = probe_corpus(&clean_corpus, cfg.prune.probe_samples, |_| true);
    let imp_noisy = stage("importance", || {
        importance_run(&dirs, &noisy_model, &probe_noisy, &seed_stem("imp_corrupted", seed))
    })?;
    let imp_clean = stage("importance", || {
        importance_run(&dirs, &clean_model, &probe_clean, &seed_stem("imp_clean", seed))
    })?;

    let total = noisy_model.n_params();
    for &(p, q) in &cfg.prune.grid {
        let stem = seed_stem(&format!("pruned_p{p}_q{q}").replace('.', "p"), seed);
        let (mask, _) = stage("prune", || {
            prune_point(&dirs, &noisy_model, &imp_noisy, &imp_clean, p, q, &stem)
        })?;
        println!(
            "{}: {} weights ({:.4}% of {})",
            dirs.mask_path(&stem).display(),
            mask.len(),
            100.0 * mask.fraction(total),
            total
        );
    }
    Ok(())
}

fn cmd_lnl_train(cfg: &ExperimentConfig) -> Result<()> {
    let dirs = RunDirs::create(&cfg.out_dir)?;
    let seed = stage_seed(cfg);
    let base = stage("pretrain", || pretrain_run(cfg, &dirs, seed, false))?;
    let peer = if cfg.lnl.method == LnlMethod::Mentornet {
        base.clone()
    } else {
        stage("pretrain", || pretrain_run(cfg, &dirs, seed, true))?
    };
    let corpus = build_sft_corpus(cfg, &dirs, seed)?;
    let stem = seed_stem(&format!("lnl_{}", cfg.lnl.method.tag()), seed);
    let run = stage("lnl-train", || {
        lnl_train_run(cfg, &dirs, cfg.lnl.method, &base, &peer, &corpus, seed, &stem)
    })?;
    println!(
        "{}: id {} (selection log {})",
        dirs.checkpoint_path(&stem).display(),
        run.model.content_id(),
        dirs.lnl_log_path(&stem).display()
    );
    Ok(())
}

fn cmd_further_ft(cfg: &ExperimentConfig) -> Result<()> {
    let dirs = RunDirs::create(&cfg.out_dir)?;
    let seed = stage_seed(cfg);
    let (stem, corpus, model) = sft_pipeline(cfg, &dirs, seed)?;
    let kind = cfg.selection.score;
    let records =
        stage("score", || score_run(&dirs, &model, &corpus, kind, score_prior(cfg, kind), &stem))?;
    let selection = stage("select", || {
        select_run(&dirs, &records, &corpus, cfg.selection.keep_fraction, &stem)
    })?;
    let kept: Vec<Sample> =
        corruptlab::selection::subset_corpus(&corpus, &selection.kept_ids)?;
    let ft_stem = format!("{stem}_further");
    let tuned = stage("further-ft", || further_ft_run(cfg, &dirs, &model, &kept, seed, &ft_stem))?;
    println!("{}: id {}", dirs.checkpoint_path(&ft_stem).display(), tuned.content_id());
    Ok(())
}

fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<()> {
    let dirs = RunDirs::create(&cfg.out_dir)?;
    let seed = stage_seed(cfg);
    let (stem, _, model) = sft_pipeline(cfg, &dirs, seed)?;
    let bench = stage("gen-data", || {
        gen_corpus(&dirs, &bench_spec(cfg, seed), &seed_stem("bench", seed))
    })?;
    let fingerprint = cfg.fingerprint()?;
    let report = stage("evaluate", || evaluate(&model, &bench, &fingerprint))?;
    let out = dirs.report_path(&format!("eval_{stem}.json"));
    std::fs::write(&out, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", out.display()))?;
    for (group, acc) in &report.per_group {
        println!("{group:?}: {acc:.4}");
    }
    println!("mean: {:.4} ({})", report.mean, out.display());
    Ok(())
}

fn cmd_report(cfg: &ExperimentConfig) -> Result<()> {
    let dirs = RunDirs::create(&cfg.out_dir)?;
    let rows = read_rows_jsonl(&dirs.report_path("rows.jsonl"))?;
    stage("report", || render_reports(&dirs, cfg.experiment, &rows))?;
    println!("re-rendered {} rows -> {}", rows.len(), dirs.report_path("results.csv").display());
    Ok(())
}
