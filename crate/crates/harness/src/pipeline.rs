//! Pipeline stages: corpus generation, pre-training, fine-tuning, scoring,
//! selection, online-selection training, importance isolation — each stage
//! persisting its artifact under a fixed output layout and returning the
//! in-memory value for composition.
//!
//! Determinism contract: every artifact is a pure function of
//! `(config, run seed)`. Stages overwrite their outputs unconditionally;
//! re-running produces byte-identical files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use corruptlab::lnl::{
    coteaching_run, jocor_run, mentornet_run, write_selection_log, LnlRun, SmallLossConfig,
};
use corruptlab::objectives::Objective;
use corruptlab::rng::mix2;
use corruptlab::scoring::{score_corpus, write_scores, ScoreKind, ScoreRecord};
use corruptlab::selection::{select_fraction, write_selection, Selection};
use corruptlab::snipweights::{
    disable, isolate_maps, snip_importance, write_importance_map, write_mask, ImportanceMap,
    WeightMask,
};
use corruptlab::synthworld::{
    build_corpus, write_corpus_jsonl, Corpus, CorpusSpec, Group, Sample, Targeting, Variant,
    BENCH_SEED_BIT,
};
use corruptlab::tinylm::{init, train, write_checkpoint, ModelState, TrainHyper};

use crate::config::{ExperimentConfig, HyperConfig, LnlMethod};

/// Errors carry their stage name as context; the alias marks functions meant
/// to be surfaced verbatim by the CLI.
pub type HarnessError = anyhow::Error;

/// Runs a stage body, prefixing any failure with the stage name.
pub fn stage<T>(name: &str, body: impl FnOnce() -> Result<T>) -> Result<T> {
    body().with_context(|| format!("stage {name}"))
}

/// Seed-derivation tags: each stage draws its randomness from
/// `mix2(run_seed, tag)`, so stages never share streams.
mod seed_tags {
    pub const PRETRAIN_DATA: u64 = 0x5031;
    pub const SFT_DATA: u64 = 0x5032;
    pub const BENCH_DATA: u64 = 0x5033;
    pub const PRETRAIN_INIT: u64 = 0x4931;
    pub const PEER_INIT: u64 = 0x4932;
    pub const PRETRAIN_BATCH: u64 = 0x4a31;
    pub const SFT_BATCH: u64 = 0x4a32;
    pub const FURTHER_BATCH: u64 = 0x4a33;
    pub const SCRATCH_BATCH: u64 = 0x4a34;
    pub const PEER_BATCH: u64 = 0x4a35;
}

/// The fixed artifact layout below one output root.
#[derive(Debug, Clone)]
pub struct RunDirs {
    root: PathBuf,
}

impl RunDirs {
    pub const SUBDIRS: [&'static str; 7] =
        ["corpora", "checkpoints", "scores", "selections", "masks", "reports", "plots"];

    /// Creates the layout (idempotent) and returns the handle.
    pub fn create(root: &Path) -> Result<RunDirs> {
        for sub in Self::SUBDIRS {
            std::fs::create_dir_all(root.join(sub))
                .with_context(|| format!("creating {}", root.join(sub).display()))?;
        }
        Ok(RunDirs { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus_path(&self, stem: &str) -> PathBuf {
        self.root.join("corpora").join(format!("{stem}.jsonl"))
    }

    pub fn checkpoint_path(&self, stem: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stem}.tlmb"))
    }

    pub fn importance_path(&self, stem: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stem}.imp.tlmb"))
    }

    pub fn scores_path(&self, stem: &str, kind: ScoreKind) -> PathBuf {
        self.root.join("scores").join(format!("{stem}.{}.csv", kind.as_str()))
    }

    pub fn selection_path(&self, stem: &str, kind: ScoreKind) -> PathBuf {
        self.root.join("selections").join(format!("{stem}.{}.json", kind.as_str()))
    }

    pub fn lnl_log_path(&self, stem: &str) -> PathBuf {
        self.root.join("selections").join(format!("{stem}.log.csv"))
    }

    pub fn mask_path(&self, stem: &str) -> PathBuf {
        self.root.join("masks").join(format!("{stem}.csv"))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn plot_path(&self, name: &str) -> PathBuf {
        self.root.join("plots").join(name)
    }
}

/// Formats a ratio as an integer percent for file stems (0.6 → "60").
pub fn pct(x: f64) -> u32 {
    (x * 100.0).round() as u32
}

/// `{stem}_s{seed}`: every per-run artifact name ends with its seed.
pub fn seed_stem(stem: &str, seed: u64) -> String {
    format!("{stem}_s{seed}")
}

pub fn targeting_tag(t: Targeting) -> &'static str {
    match t {
        Targeting::Uniform => "uniform",
        Targeting::NoVqa => "no_vqa",
        Targeting::NoMcvqa => "no_mcvqa",
        Targeting::NoConv => "no_conv",
        Targeting::None => "none",
    }
}

pub fn variant_tag(v: Variant) -> &'static str {
    match v {
        Variant::Corrupted => "corrupted",
        Variant::Removed => "removed",
        Variant::Clean => "clean",
    }
}

/// Stem of a fine-tuning corpus/checkpoint: `sft_cr{pct}_{targeting}_{variant}`.
pub fn sft_stem(cr: f64, targeting: Targeting, variant: Variant) -> String {
    format!("sft_cr{}_{}_{}", pct(cr), targeting_tag(targeting), variant_tag(variant))
}

// ---------------------------------------------------------------------------
// Corpus specs
// ---------------------------------------------------------------------------

/// Pre-training data: captions plus the configured fraction of
/// answer-verdict samples. Always clean.
pub fn pretrain_spec(cfg: &ExperimentConfig, run_seed: u64) -> CorpusSpec {
    let sv = cfg.pretrain.selfval_fraction;
    let mut group_mix = std::collections::BTreeMap::new();
    group_mix.insert(Group::Caption, 1.0 - sv);
    if sv > 0.0 {
        group_mix.insert(Group::SelfVal, sv);
    }
    CorpusSpec {
        n_samples: cfg.pretrain.n_samples,
        cr: 0.0,
        targeting: Targeting::None,
        group_mix,
        seed: mix2(run_seed, seed_tags::PRETRAIN_DATA) & !BENCH_SEED_BIT,
        variant: Variant::Clean,
    }
}

/// A fine-tuning corpus. The scene stream depends only on the run seed, so
/// every grid point of an experiment corrupts the *same* underlying data.
pub fn sft_spec(
    cfg: &ExperimentConfig,
    run_seed: u64,
    cr: f64,
    targeting: Targeting,
    variant: Variant,
) -> CorpusSpec {
    CorpusSpec {
        n_samples: cfg.sft.n_samples,
        cr,
        targeting,
        group_mix: cfg.sft.group_mix.clone(),
        seed: mix2(run_seed, seed_tags::SFT_DATA) & !BENCH_SEED_BIT,
        variant,
    }
}

/// The benchmark: clean, equal thirds of the three fine-tuning formats, and
/// carrying the reserved seed bit that keeps its scenes off-limits to
/// training corpora.
pub fn bench_spec(cfg: &ExperimentConfig, run_seed: u64) -> CorpusSpec {
    CorpusSpec {
        n_samples: 3 * cfg.bench.per_group,
        cr: 0.0,
        targeting: Targeting::None,
        group_mix: [
            (Group::Vqa, 1.0 / 3.0),
            (Group::Mcvqa, 1.0 / 3.0),
            (Group::Conv, 1.0 / 3.0),
        ]
        .into_iter()
        .collect(),
        seed: mix2(run_seed, seed_tags::BENCH_DATA) | BENCH_SEED_BIT,
        variant: Variant::Clean,
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Builds a corpus and persists it (JSONL plus metadata sidecar).
pub fn gen_corpus(dirs: &RunDirs, spec: &CorpusSpec, stem: &str) -> Result<Corpus> {
    let corpus = build_corpus(spec).with_context(|| format!("building corpus {stem}"))?;
    write_corpus_jsonl(&corpus, &dirs.corpus_path(stem))
        .with_context(|| format!("writing corpus {stem}"))?;
    Ok(corpus)
}

fn train_hyper(h: &HyperConfig, seed: u64) -> TrainHyper {
    TrainHyper { lr: h.lr, batch_size: h.batch_size, steps: h.steps, seed }
}

/// Trains `base` on `samples` and persists the checkpoint under `stem`.
pub fn finetune(
    dirs: &RunDirs,
    base: &ModelState,
    samples: &[Sample],
    objective: &Objective,
    hyper: &TrainHyper,
    stem: &str,
) -> Result<ModelState> {
    let run = train(base, samples, objective, hyper)
        .with_context(|| format!("training {stem}"))?;
    write_checkpoint(&dirs.checkpoint_path(stem), &run.model)
        .with_context(|| format!("writing checkpoint {stem}"))?;
    Ok(run.model)
}

/// Pre-trains a fresh model on the captioning/verdict mix. `peer` selects an
/// independent initialization (used as the second network of paired
/// online-selection methods).
pub fn pretrain_run(
    cfg: &ExperimentConfig,
    dirs: &RunDirs,
    run_seed: u64,
    peer: bool,
) -> Result<ModelState> {
    let spec = pretrain_spec(cfg, run_seed);
    let stem = seed_stem(if peer { "pretrain_peer" } else { "pretrain" }, run_seed);
    let corpus = gen_corpus(dirs, &spec, &stem)?;
    let init_tag = if peer { seed_tags::PEER_INIT } else { seed_tags::PRETRAIN_INIT };
    let batch_tag = if peer { seed_tags::PEER_BATCH } else { seed_tags::PRETRAIN_BATCH };
    let base = init(&cfg.model, mix2(run_seed, init_tag))?;
    let hyper = train_hyper(&cfg.pretrain.hyper, mix2(run_seed, batch_tag));
    finetune(dirs, &base, &corpus.samples, &Objective::Ce, &hyper, &stem)
}

/// Supervised fine-tuning from a pre-trained base on a given corpus.
pub fn sft_run(
    cfg: &ExperimentConfig,
    dirs: &RunDirs,
    base: &ModelState,
    corpus: &Corpus,
    objective: &Objective,
    run_seed: u64,
    stem: &str,
) -> Result<ModelState> {
    let hyper = train_hyper(&cfg.sft.hyper, mix2(run_seed, seed_tags::SFT_BATCH));
    finetune(dirs, base, &corpus.samples, objective, &hyper, stem)
}

/// Number of further fine-tuning steps: the configured fraction of the SFT
/// steps, at least one.
pub fn further_steps(cfg: &ExperimentConfig) -> u64 {
    ((cfg.sft.hyper.steps as f64 * cfg.further.steps_fraction).round() as u64).max(1)
}

/// Further fine-tuning: continues from a fine-tuned model on a kept subset
/// for a fraction of the SFT steps, with a fresh batch stream.
pub fn further_ft_run(
    cfg: &ExperimentConfig,
    dirs: &RunDirs,
    model: &ModelState,
    kept: &[Sample],
    run_seed: u64,
    stem: &str,
) -> Result<ModelState> {
    let hyper = TrainHyper {
        lr: cfg.sft.hyper.lr,
        batch_size: cfg.sft.hyper.batch_size,
        steps: further_steps(cfg),
        seed: mix2(run_seed, seed_tags::FURTHER_BATCH),
    };
    finetune(dirs, model, kept, &Objective::Ce, &hyper, stem)
}

/// From-scratch counterpart: trains the pre-trained base on the kept subset
/// for the full budget (SFT steps plus the further-stage steps).
pub fn scratch_run(
    cfg: &ExperimentConfig,
    dirs: &RunDirs,
    base: &ModelState,
    kept: &[Sample],
    run_seed: u64,
    stem: &str,
) -> Result<ModelState> {
    let hyper = TrainHyper {
        lr: cfg.sft.hyper.lr,
        batch_size: cfg.sft.hyper.batch_size,
        steps: cfg.sft.hyper.steps + further_steps(cfg),
        seed: mix2(run_seed, seed_tags::SCRATCH_BATCH),
    };
    finetune(dirs, base, kept, &Objective::Ce, &hyper, stem)
}

/// Scores a corpus under a model and persists the CSV.
pub fn score_run(
    dirs: &RunDirs,
    model: &ModelState,
    corpus: &Corpus,
    kind: ScoreKind,
    prior_corrupted: Option<f64>,
    stem: &str,
) -> Result<Vec<ScoreRecord>> {
    let records = score_corpus(model, corpus, kind, prior_corrupted)
        .with_context(|| format!("scoring {stem} with {}", kind.as_str()))?;
    write_scores(&dirs.scores_path(stem, kind), &records)
        .with_context(|| format!("writing scores {stem}"))?;
    Ok(records)
}

/// Keeps the cleanest fraction by a score and persists the selection.
pub fn select_run(
    dirs: &RunDirs,
    records: &[ScoreRecord],
    corpus: &Corpus,
    fraction: f64,
    stem: &str,
) -> Result<Selection> {
    let kind = records.first().map(|r| r.kind).context("selection needs score records")?;
    let selection = select_fraction(records, corpus, fraction)
        .with_context(|| format!("selecting from {stem}"))?;
    write_selection(&dirs.selection_path(stem, kind), &selection)
        .with_context(|| format!("writing selection {stem}"))?;
    Ok(selection)
}

/// Online-selection fine-tuning from the pre-trained base(s); persists the
/// primary model checkpoint and the per-step selection log.
#[allow(clippy::too_many_arguments)]
pub fn lnl_train_run(
    cfg: &ExperimentConfig,
    dirs: &RunDirs,
    method: LnlMethod,
    base: &ModelState,
    peer_base: &ModelState,
    corpus: &Corpus,
    run_seed: u64,
    stem: &str,
) -> Result<LnlRun> {
    let select = SmallLossConfig {
        alpha: cfg.lnl.alpha.unwrap_or(corpus.spec.cr),
        warmup_fraction: cfg.lnl.warmup_fraction,
    };
    let hyper = train_hyper(&cfg.sft.hyper, mix2(run_seed, seed_tags::SFT_BATCH));
    let run = match method {
        LnlMethod::Mentornet => {
            mentornet_run(base, &corpus.samples, &Objective::Ce, &hyper, &select)
        }
        // Both networks see the same batches (peer seed = own seed); they
        // differ by their independent pre-training initializations.
        LnlMethod::Coteaching => coteaching_run(
            base,
            peer_base,
            &corpus.samples,
            &Objective::Ce,
            &hyper,
            hyper.seed,
            &select,
        ),
        LnlMethod::Jocor => jocor_run(
            base,
            peer_base,
            &corpus.samples,
            &Objective::Ce,
            &hyper,
            hyper.seed,
            &select,
            cfg.lnl.lambda,
        ),
    }
    .with_context(|| format!("online-selection training {stem}"))?;
    write_checkpoint(&dirs.checkpoint_path(stem), &run.model)
        .with_context(|| format!("writing checkpoint {stem}"))?;
    write_selection_log(&dirs.lnl_log_path(stem), &run.log)
        .with_context(|| format!("writing selection log {stem}"))?;
    Ok(run)
}

/// A probe corpus: the first `limit` samples satisfying `keep`, with the
/// spec's sample count adjusted. Used for importance estimation.
pub fn probe_corpus(parent: &Corpus, limit: usize, keep: impl Fn(&Sample) -> bool) -> Corpus {
    let samples: Vec<Sample> =
        parent.samples.iter().filter(|s| keep(s)).take(limit).cloned().collect();
    let mut spec = parent.spec.clone();
    spec.n_samples = samples.len();
    Corpus { spec, samples }
}

/// Weight-importance estimation over a probe corpus; persists the map
/// alongside the checkpoints.
pub fn importance_run(
    dirs: &RunDirs,
    model: &ModelState,
    probe: &Corpus,
    stem: &str,
) -> Result<ImportanceMap> {
    if probe.samples.is_empty() {
        bail!("importance probe {stem} is empty");
    }
    let imp = snip_importance(model, probe)
        .with_context(|| format!("estimating importance {stem}"))?;
    write_importance_map(&dirs.importance_path(stem), &imp)
        .with_context(|| format!("writing importance {stem}"))?;
    Ok(imp)
}

/// Corruption isolation at one (p, q) grid point; persists the mask and
/// returns it with the pruned model.
#[allow(clippy::too_many_arguments)]
pub fn prune_point(
    dirs: &RunDirs,
    model: &ModelState,
    noisy: &ImportanceMap,
    clean: &ImportanceMap,
    p: f64,
    q: f64,
    stem: &str,
) -> Result<(WeightMask, ModelState)> {
    let mask = isolate_maps(noisy, q, clean, p)
        .with_context(|| format!("isolating weights {stem}"))?;
    write_mask(&dirs.mask_path(stem), &mask).with_context(|| format!("writing mask {stem}"))?;
    let pruned = disable(model, &mask).with_context(|| format!("disabling weights {stem}"))?;
    write_checkpoint(&dirs.checkpoint_path(stem), &pruned)
        .with_context(|| format!("writing checkpoint {stem}"))?;
    Ok((mask, pruned))
}
