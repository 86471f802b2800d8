//! The five standard experiments, each a composition of pipeline stages:
//!
//! - E1: corruption-ratio sweep, corrupted vs removed.
//! - E2: group-targeted corruption at fixed ratio, plus a clean reference.
//! - E3: weight-importance isolation and disabling on a corrupted model.
//! - E4: corruption detection — precision/recall of sample scores under
//!   models trained at increasing corruption.
//! - E5: recovery strategies compared on one corrupted corpus.
//!
//! Every experiment emits one [`ResultRow`] per evaluated model and renders
//! reports at the end. Artifacts are pure functions of `(config, seed)`.

use std::collections::{BTreeMap, BTreeSet};

use anyhow::Result;

use corruptlab::objectives::Objective;
use corruptlab::scoring::{ScoreKind, ScoreRecord};
use corruptlab::selection::{pr_curve, precision_at_recall, subset_corpus, write_pr};
use corruptlab::synthworld::{Corpus, Sample, Targeting, Variant};
use corruptlab::tinylm::ModelState;

use crate::config::{Experiment, ExperimentConfig, LnlMethod, Strategy};
use crate::eval::{evaluate, EvalReport};
use crate::pipeline::{
    bench_spec, gen_corpus, importance_run, lnl_train_run, pct, pretrain_run, probe_corpus,
    prune_point, further_ft_run, scratch_run, score_run, seed_stem, select_run, sft_run, sft_spec,
    sft_stem, stage, targeting_tag, variant_tag, RunDirs,
};
use crate::report::{render_reports, row, write_precision_csv, PrecisionRow, ResultRow};

/// Per-seed fixings shared by every run of an experiment: the pre-trained
/// base, the held-out benchmark, and the config fingerprint.
pub struct SeedContext {
    pub seed: u64,
    pub pretrained: ModelState,
    pub bench: Corpus,
    pub fingerprint: String,
}

pub fn seed_context(cfg: &ExperimentConfig, dirs: &RunDirs, seed: u64) -> Result<SeedContext> {
    let fingerprint = cfg.fingerprint()?;
    let pretrained = stage("pretrain", || pretrain_run(cfg, dirs, seed, false))?;
    let bench =
        stage("gen-data", || gen_corpus(dirs, &bench_spec(cfg, seed), &seed_stem("bench", seed)))?;
    Ok(SeedContext { seed, pretrained, bench, fingerprint })
}

/// Runs the experiment named by the config over all its seeds and renders
/// the reports. Returns the rows in emission order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let dirs = RunDirs::create(&cfg.out_dir)?;
    let rows = match cfg.experiment {
        Experiment::E1Sweep => run_e1(cfg, &dirs),
        Experiment::E2Targeted => run_e2(cfg, &dirs),
        Experiment::E3Prune => run_e3(cfg, &dirs),
        Experiment::E4Detect => run_e4(cfg, &dirs),
        Experiment::E5Recover => run_e5(cfg, &dirs),
    }?;
    stage("report", || render_reports(&dirs, cfg.experiment, &rows))?;
    Ok(rows)
}

fn push_row(rows: &mut Vec<ResultRow>, r: ResultRow) {
    eprintln!("[{} s{}] {}  mean={:.3}", r.experiment, r.seed, r.run, r.acc_mean);
    rows.push(r);
}

/// One fine-tuned model under the standard naming, with its corpus and
/// benchmark report.
struct SftOutcome {
    stem: String,
    model: ModelState,
    corpus: Corpus,
    report: EvalReport,
}

fn sft_and_eval(
    cfg: &ExperimentConfig,
    dirs: &RunDirs,
    ctx: &SeedContext,
    cr: f64,
    targeting: Targeting,
    variant: Variant,
    objective: &Objective,
) -> Result<SftOutcome> {
    let stem = seed_stem(&sft_stem(cr, targeting, variant), ctx.seed);
    let spec = sft_spec(cfg, ctx.seed, cr, targeting, variant);
    let corpus = stage("gen-data", || gen_corpus(dirs, &spec, &stem))?;
    let model =
        stage("sft", || sft_run(cfg, dirs, &ctx.pretrained, &corpus, objective, ctx.seed, &stem))?;
    let report = stage("evaluate", || evaluate(&model, &ctx.bench, &ctx.fingerprint))?;
    Ok(SftOutcome { stem, model, corpus, report })
}

// ---------------------------------------------------------------------------
// E1: corruption-ratio sweep
// ---------------------------------------------------------------------------

fn run_e1(cfg: &ExperimentConfig, dirs: &RunDirs) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = seed_context(cfg, dirs, seed)?;
        for &cr in &cfg.grids.e1_crs {
            for variant in [Variant::Corrupted, Variant::Removed] {
                let out =
                    sft_and_eval(cfg, dirs, &ctx, cr, cfg.sft.targeting, variant, &cfg.objective)?;
                push_row(
                    &mut rows,
                    row(
                        cfg.experiment,
                        seed,
                        &out.stem,
                        cr,
                        targeting_tag(cfg.sft.targeting),
                        variant_tag(variant),
                        "-",
                        None,
                        out.model.content_id(),
                        &out.report,
                    ),
                );
            }
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// E2: targeted corruption
// ---------------------------------------------------------------------------

fn run_e2(cfg: &ExperimentConfig, dirs: &RunDirs) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = seed_context(cfg, dirs, seed)?;
        // A clean reference plus each targeting mode at the configured ratio.
        let mut plan = vec![(0.0, Targeting::Uniform)];
        plan.extend(cfg.grids.e2_targetings.iter().map(|&t| (cfg.sft.cr, t)));
        let mut seen = BTreeSet::new();
        for (cr, targeting) in plan {
            let stem = seed_stem(&sft_stem(cr, targeting, Variant::Corrupted), seed);
            if !seen.insert(stem) {
                continue;
            }
            let out =
                sft_and_eval(cfg, dirs, &ctx, cr, targeting, Variant::Corrupted, &cfg.objective)?;
            push_row(
                &mut rows,
                row(
                    cfg.experiment,
                    seed,
                    &out.stem,
                    cr,
                    targeting_tag(targeting),
                    variant_tag(Variant::Corrupted),
                    "-",
                    None,
                    out.model.content_id(),
                    &out.report,
                ),
            );
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// E3: importance isolation and pruning
// ---------------------------------------------------------------------------

/// Percent value as a stem fragment: `10` for 10.0, `9p5` for 9.5.
fn fmt_pctf(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{}", x as i64)
    } else {
        format!("{x}").replace('.', "p")
    }
}

fn run_e3(cfg: &ExperimentConfig, dirs: &RunDirs) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = seed_context(cfg, dirs, seed)?;
        let cr = cfg.sft.cr;
        let t = cfg.sft.targeting;
        let corrupted = sft_and_eval(cfg, dirs, &ctx, cr, t, Variant::Corrupted, &cfg.objective)?;
        let removed = sft_and_eval(cfg, dirs, &ctx, cr, t, Variant::Removed, &cfg.objective)?;
        let clean = sft_and_eval(cfg, dirs, &ctx, 0.0, t, Variant::Corrupted, &cfg.objective)?;
        for (out, strategy) in
            [(&corrupted, "corrupted"), (&removed, "removed"), (&clean, "clean")]
        {
            push_row(
                &mut rows,
                row(
                    cfg.experiment,
                    seed,
                    &out.stem,
                    out.corpus.spec.cr,
                    targeting_tag(t),
                    variant_tag(out.corpus.spec.variant),
                    strategy,
                    None,
                    out.model.content_id(),
                    &out.report,
                ),
            );
        }

        // Importance of each weight, once through corrupted eyes (the
        // corrupted samples under the corrupted model) and once through
        // clean eyes (clean data under the clean-trained twin).
        let probe_noisy =
            probe_corpus(&corrupted.corpus, cfg.prune.probe_samples, |s| !s.is_clean());
        let probe_clean = probe_corpus(&clean.corpus, cfg.prune.probe_samples, |_| true);
        let imp_noisy = stage("importance", || {
            importance_run(dirs, &corrupted.model, &probe_noisy, &seed_stem("imp_corrupted", seed))
        })?;
        let imp_clean = stage("importance", || {
            importance_run(dirs, &clean.model, &probe_clean, &seed_stem("imp_clean", seed))
        })?;

        let total = corrupted.model.n_params();
        for &(p, q) in &cfg.prune.grid {
            let tagpq = format!("p{}_q{}", fmt_pctf(p), fmt_pctf(q));
            let stem = seed_stem(&format!("pruned_{tagpq}"), seed);
            let (mask, pruned) = stage("prune", || {
                prune_point(dirs, &corrupted.model, &imp_noisy, &imp_clean, p, q, &stem)
            })?;
            let report = stage("evaluate", || evaluate(&pruned, &ctx.bench, &ctx.fingerprint))?;
            push_row(
                &mut rows,
                row(
                    cfg.experiment,
                    seed,
                    &stem,
                    cr,
                    targeting_tag(t),
                    variant_tag(Variant::Corrupted),
                    &format!("prune_{tagpq}"),
                    Some(mask.fraction(total)),
                    pruned.content_id(),
                    &report,
                ),
            );
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// E4: detection
// ---------------------------------------------------------------------------

fn score_prior(kind: ScoreKind, cr: f64) -> Option<f64> {
    matches!(kind, ScoreKind::Posterior).then_some(cr)
}

fn run_e4(cfg: &ExperimentConfig, dirs: &RunDirs) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    let mut precision_rows = Vec::new();
    let eval_cr = cfg.grids.e4_eval_cr;
    for &seed in &cfg.seeds {
        let ctx = seed_context(cfg, dirs, seed)?;
        // The corpus every detector is scored on: fixed corruption ratio,
        // same underlying scenes as the training corpora.
        let eval_stem = seed_stem(&sft_stem(eval_cr, cfg.sft.targeting, Variant::Corrupted), seed);
        let eval_spec = sft_spec(cfg, seed, eval_cr, cfg.sft.targeting, Variant::Corrupted);
        let eval_corpus = stage("gen-data", || gen_corpus(dirs, &eval_spec, &eval_stem))?;
        for &cr in &cfg.grids.e4_crs {
            let out =
                sft_and_eval(cfg, dirs, &ctx, cr, cfg.sft.targeting, Variant::Corrupted, &cfg.objective)?;
            push_row(
                &mut rows,
                row(
                    cfg.experiment,
                    seed,
                    &out.stem,
                    cr,
                    targeting_tag(cfg.sft.targeting),
                    variant_tag(Variant::Corrupted),
                    "-",
                    None,
                    out.model.content_id(),
                    &out.report,
                ),
            );
            for &kind in &cfg.score_kinds {
                let score_stem = format!("e4_cr{}_on_cr{}_s{}", pct(cr), pct(eval_cr), seed);
                let records = stage("score", || {
                    score_run(
                        dirs,
                        &out.model,
                        &eval_corpus,
                        kind,
                        score_prior(kind, eval_cr),
                        &score_stem,
                    )
                })?;
                let curve = pr_curve(&records, &eval_corpus)?;
                write_pr(
                    &dirs.plot_path(&format!("pr_{score_stem}.{}.csv", kind.as_str())),
                    &curve,
                )?;
                precision_rows.push(PrecisionRow {
                    seed,
                    train_cr_pct: pct(cr),
                    kind: kind.as_str().to_string(),
                    recall_target: 0.5,
                    precision: precision_at_recall(&curve, 0.5),
                });
            }
        }
    }
    stage("report", || {
        write_precision_csv(&dirs.plot_path("e4_precision.csv"), &precision_rows)
    })?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// E5: recovery strategies
// ---------------------------------------------------------------------------

/// Lazily shared per-seed intermediates: the cross-entropy backbone, the
/// independently pre-trained peer, and score tables over the corpus.
#[derive(Default)]
struct E5Cache {
    ce: Option<ModelState>,
    peer: Option<ModelState>,
    scores: BTreeMap<ScoreKind, Vec<ScoreRecord>>,
}

fn e5_stem(strategy: Strategy, seed: u64) -> String {
    seed_stem(&format!("e5_{}", strategy.tag()), seed)
}

fn ce_model(
    cfg: &ExperimentConfig,
    dirs: &RunDirs,
    ctx: &SeedContext,
    corpus: &Corpus,
    cache: &mut E5Cache,
) -> Result<ModelState> {
    if cache.ce.is_none() {
        let stem = e5_stem(Strategy::Ce, ctx.seed);
        let model = stage("sft", || {
            sft_run(cfg, dirs, &ctx.pretrained, corpus, &Objective::Ce, ctx.seed, &stem)
        })?;
        cache.ce = Some(model);
    }
    Ok(cache.ce.clone().expect("just filled"))
}

fn peer_model(
    cfg: &ExperimentConfig,
    dirs: &RunDirs,
    ctx: &SeedContext,
    cache: &mut E5Cache,
) -> Result<ModelState> {
    if cache.peer.is_none() {
        cache.peer = Some(stage("pretrain", || pretrain_run(cfg, dirs, ctx.seed, true))?);
    }
    Ok(cache.peer.clone().expect("just filled"))
}

/// Scores the corpus under the cross-entropy backbone (cached per kind).
fn scores_for(
    cfg: &ExperimentConfig,
    dirs: &RunDirs,
    ctx: &SeedContext,
    corpus: &Corpus,
    kind: ScoreKind,
    cache: &mut E5Cache,
) -> Result<Vec<ScoreRecord>> {
    if !cache.scores.contains_key(&kind) {
        let ce = ce_model(cfg, dirs, ctx, corpus, cache)?;
        let stem = e5_stem(Strategy::Ce, ctx.seed);
        let records = stage("score", || {
            score_run(dirs, &ce, corpus, kind, score_prior(kind, corpus.spec.cr), &stem)
        })?;
        cache.scores.insert(kind, records);
    }
    Ok(cache.scores[&kind].clone())
}

/// Keeps the configured cleanest fraction by `kind` and returns the subset.
fn select_kept(
    cfg: &ExperimentConfig,
    dirs: &RunDirs,
    ctx: &SeedContext,
    corpus: &Corpus,
    kind: ScoreKind,
    cache: &mut E5Cache,
) -> Result<Vec<Sample>> {
    let records = scores_for(cfg, dirs, ctx, corpus, kind, cache)?;
    let stem = e5_stem(Strategy::Ce, ctx.seed);
    let selection = stage("select", || {
        select_run(dirs, &records, corpus, cfg.selection.keep_fraction, &stem)
    })?;
    Ok(subset_corpus(corpus, &selection.kept_ids)?)
}

/// Score-then-further-fine-tune from the cross-entropy backbone.
fn score_ft(
    cfg: &ExperimentConfig,
    dirs: &RunDirs,
    ctx: &SeedContext,
    corpus: &Corpus,
    kind: ScoreKind,
    cache: &mut E5Cache,
    stem: &str,
) -> Result<ModelState> {
    let kept = select_kept(cfg, dirs, ctx, corpus, kind, cache)?;
    let ce = ce_model(cfg, dirs, ctx, corpus, cache)?;
    stage("further-ft", || further_ft_run(cfg, dirs, &ce, &kept, ctx.seed, stem))
}

fn run_strategy(
    cfg: &ExperimentConfig,
    dirs: &RunDirs,
    ctx: &SeedContext,
    corpus: &Corpus,
    strategy: Strategy,
    cache: &mut E5Cache,
) -> Result<(String, ModelState)> {
    let stem = e5_stem(strategy, ctx.seed);
    let model = match strategy {
        Strategy::Ce => ce_model(cfg, dirs, ctx, corpus, cache)?,
        Strategy::Gce => {
            let objective = Objective::Gce { q: cfg.grids.e5_gce_q };
            stage("sft", || sft_run(cfg, dirs, &ctx.pretrained, corpus, &objective, ctx.seed, &stem))?
        }
        Strategy::PhuberCe => {
            let objective = Objective::PhuberCe { tau: cfg.grids.e5_phuber_tau };
            stage("sft", || sft_run(cfg, dirs, &ctx.pretrained, corpus, &objective, ctx.seed, &stem))?
        }
        Strategy::Mentornet | Strategy::Coteaching | Strategy::Jocor => {
            let method = match strategy {
                Strategy::Mentornet => LnlMethod::Mentornet,
                Strategy::Coteaching => LnlMethod::Coteaching,
                _ => LnlMethod::Jocor,
            };
            // The single-network method never touches the peer; skip the
            // extra pre-training run for it.
            let peer = if method == LnlMethod::Mentornet {
                ctx.pretrained.clone()
            } else {
                peer_model(cfg, dirs, ctx, cache)?
            };
            let run = stage("lnl-train", || {
                lnl_train_run(cfg, dirs, method, &ctx.pretrained, &peer, corpus, ctx.seed, &stem)
            })?;
            run.model
        }
        Strategy::El2nFt => score_ft(cfg, dirs, ctx, corpus, ScoreKind::El2n, cache, &stem)?,
        Strategy::GradnormFt => {
            score_ft(cfg, dirs, ctx, corpus, ScoreKind::GradNorm, cache, &stem)?
        }
        Strategy::EntropyFt => score_ft(cfg, dirs, ctx, corpus, ScoreKind::Entropy, cache, &stem)?,
        Strategy::PplFt => score_ft(cfg, dirs, ctx, corpus, ScoreKind::Ppl, cache, &stem)?,
        Strategy::ValPplFt => score_ft(cfg, dirs, ctx, corpus, ScoreKind::ValPpl, cache, &stem)?,
        Strategy::GtFt => {
            let kept: Vec<Sample> =
                corpus.samples.iter().filter(|s| s.is_clean()).cloned().collect();
            let ce = ce_model(cfg, dirs, ctx, corpus, cache)?;
            stage("further-ft", || further_ft_run(cfg, dirs, &ce, &kept, ctx.seed, &stem))?
        }
        Strategy::ValPplScratch => {
            let kept = select_kept(cfg, dirs, ctx, corpus, ScoreKind::ValPpl, cache)?;
            stage("sft", || scratch_run(cfg, dirs, &ctx.pretrained, &kept, ctx.seed, &stem))?
        }
    };
    Ok((stem, model))
}

fn run_e5(cfg: &ExperimentConfig, dirs: &RunDirs) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = seed_context(cfg, dirs, seed)?;
        let cr = cfg.sft.cr;
        let stem = seed_stem(&sft_stem(cr, cfg.sft.targeting, Variant::Corrupted), seed);
        let spec = sft_spec(cfg, seed, cr, cfg.sft.targeting, Variant::Corrupted);
        let corpus = stage("gen-data", || gen_corpus(dirs, &spec, &stem))?;
        let mut cache = E5Cache::default();
        for &strategy in &cfg.grids.e5_strategies {
            let (run_stem, model) = run_strategy(cfg, dirs, &ctx, &corpus, strategy, &mut cache)?;
            let report = stage("evaluate", || evaluate(&model, &ctx.bench, &ctx.fingerprint))?;
            push_row(
                &mut rows,
                row(
                    cfg.experiment,
                    seed,
                    &run_stem,
                    cr,
                    targeting_tag(cfg.sft.targeting),
                    variant_tag(Variant::Corrupted),
                    strategy.tag(),
                    None,
                    model.content_id(),
                    &report,
                ),
            );
        }
    }
    Ok(rows)
}
