//! Result rows and report rendering.
//!
//! Every experiment appends one row per evaluated model to `rows.jsonl`
//! (the full record) and renders `results.csv` plus per-experiment plot
//! CSVs from those rows. Rendering is a pure function of the rows, so the
//! `report` command can re-emit everything byte-identically.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::Experiment;
use crate::pipeline::{pct, RunDirs};

/// One evaluated model: where it came from and how it scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub seed: u64,
    /// Artifact stem; unique within an experiment run.
    pub run: String,
    /// Corruption rate of the fine-tuning corpus (percent).
    pub cr_pct: u32,
    pub targeting: String,
    pub variant: String,
    /// Training/cleaning strategy tag, `-` when not applicable.
    pub strategy: String,
    /// Fraction of weights disabled, for pruned models only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked_fraction: Option<f64>,
    pub checkpoint_id: String,
    pub bench_id: String,
    pub acc_vqa: f64,
    pub acc_mcvqa: f64,
    pub acc_conv: f64,
    pub acc_mean: f64,
    pub config_fingerprint: String,
}

fn fmt_acc(x: f64) -> String {
    format!("{x:.6}")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Persists the full row record, one JSON object per line.
pub fn write_rows_jsonl(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_rows_jsonl(path: &Path) -> Result<Vec<ResultRow>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ResultRow = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: bad row", path.display(), i + 1))?;
        rows.push(row);
    }
    Ok(rows)
}

const RESULTS_HEADER: &str = "experiment,seed,run,cr_pct,targeting,variant,strategy,\
masked_fraction,checkpoint_id,bench_id,acc_vqa,acc_mcvqa,acc_conv,acc_mean,config_fingerprint";

/// The flat summary table. Header-only when there are no rows.
pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let masked = r.masked_fraction.map(|f| format!("{f:.6}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.experiment,
            r.seed,
            r.run,
            r.cr_pct,
            r.targeting,
            r.variant,
            r.strategy,
            masked,
            r.checkpoint_id,
            r.bench_id,
            fmt_acc(r.acc_vqa),
            fmt_acc(r.acc_mcvqa),
            fmt_acc(r.acc_conv),
            fmt_acc(r.acc_mean),
            r.config_fingerprint,
        )?;
    }
    write_atomic(path, out.as_bytes())
}

/// Long-format accuracy table keyed by corruption rate, for the sweep plot.
fn write_sweep_plot(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut out = String::from("seed,cr_pct,variant,group,accuracy\n");
    for r in rows {
        for (group, acc) in
            [("vqa", r.acc_vqa), ("mcvqa", r.acc_mcvqa), ("conv", r.acc_conv), ("mean", r.acc_mean)]
        {
            writeln!(out, "{},{},{},{},{}", r.seed, r.cr_pct, r.variant, group, fmt_acc(acc))?;
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Long-format accuracy table keyed by targeting, for the targeting plot.
fn write_targeting_plot(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut out = String::from("seed,targeting,cr_pct,group,accuracy\n");
    for r in rows {
        for (group, acc) in
            [("vqa", r.acc_vqa), ("mcvqa", r.acc_mcvqa), ("conv", r.acc_conv), ("mean", r.acc_mean)]
        {
            writeln!(out, "{},{},{},{},{}", r.seed, r.targeting, r.cr_pct, group, fmt_acc(acc))?;
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Per-strategy table for the pruning experiment (reference models carry an
/// empty masked fraction).
fn write_pruning_plot(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut out = String::from("seed,strategy,masked_fraction,acc_vqa,acc_mcvqa,acc_conv,acc_mean\n");
    for r in rows {
        let masked = r.masked_fraction.map(|f| format!("{f:.6}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.seed,
            r.strategy,
            masked,
            fmt_acc(r.acc_vqa),
            fmt_acc(r.acc_mcvqa),
            fmt_acc(r.acc_conv),
            fmt_acc(r.acc_mean),
        )?;
    }
    write_atomic(path, out.as_bytes())
}

/// Per-strategy table for the cleaning-strategy comparison.
fn write_strategy_plot(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut out = String::from("seed,strategy,acc_vqa,acc_mcvqa,acc_conv,acc_mean\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.seed,
            r.strategy,
            fmt_acc(r.acc_vqa),
            fmt_acc(r.acc_mcvqa),
            fmt_acc(r.acc_conv),
            fmt_acc(r.acc_mean),
        )?;
    }
    write_atomic(path, out.as_bytes())
}

/// Renders `rows.jsonl`, `results.csv`, and the experiment's plot table.
/// Pure in the rows: re-rendering emits byte-identical files.
pub fn render_reports(dirs: &RunDirs, experiment: Experiment, rows: &[ResultRow]) -> Result<()> {
    write_rows_jsonl(&dirs.report_path("rows.jsonl"), rows)?;
    write_results_csv(&dirs.report_path("results.csv"), rows)?;
    match experiment {
        Experiment::E1Sweep => write_sweep_plot(&dirs.plot_path("e1_accuracy.csv"), rows),
        Experiment::E2Targeted => write_targeting_plot(&dirs.plot_path("e2_targeting.csv"), rows),
        Experiment::E3Prune => write_pruning_plot(&dirs.plot_path("e3_pruning.csv"), rows),
        // The detection experiment's main outputs are its precision-recall
        // tables, written during the run; its rows still land in results.csv.
        Experiment::E4Detect => write_sweep_plot(&dirs.plot_path("e4_accuracy.csv"), rows),
        Experiment::E5Recover => write_strategy_plot(&dirs.plot_path("e5_strategies.csv"), rows),
    }
}

/// Summary table of precision at a recall point, one row per
/// (seed, training corruption rate, score kind).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRow {
    pub seed: u64,
    pub train_cr_pct: u32,
    pub kind: String,
    pub recall_target: f64,
    /// Empty when undefined (no clean samples in the scored corpus).
    pub precision: Option<f64>,
}

pub fn write_precision_csv(path: &Path, rows: &[PrecisionRow]) -> Result<()> {
    let mut out = String::from("seed,train_cr_pct,kind,recall_target,precision\n");
    for r in rows {
        let p = r.precision.map(|p| format!("{p:.6}")).unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", r.seed, r.train_cr_pct, r.kind, r.recall_target, p)?;
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_precision_csv(path: &Path) -> Result<Vec<PrecisionRow>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            anyhow::bail!("{}:{}: expected 5 fields", path.display(), i + 1);
        }
        rows.push(PrecisionRow {
            seed: fields[0].parse()?,
            train_cr_pct: fields[1].parse()?,
            kind: fields[2].to_string(),
            recall_target: fields[3].parse()?,
            precision: if fields[4].is_empty() { None } else { Some(fields[4].parse()?) },
        });
    }
    Ok(rows)
}

/// Builds a row from an evaluation report plus run provenance.
#[allow(clippy::too_many_arguments)]
pub fn row(
    experiment: Experiment,
    seed: u64,
    run: &str,
    cr: f64,
    targeting: &str,
    variant: &str,
    strategy: &str,
    masked_fraction: Option<f64>,
    checkpoint_id: String,
    report: &crate::eval::EvalReport,
) -> ResultRow {
    use corruptlab::synthworld::Group;
    ResultRow {
        experiment: experiment.tag().to_string(),
        seed,
        run: run.to_string(),
        cr_pct: pct(cr),
        targeting: targeting.to_string(),
        variant: variant.to_string(),
        strategy: strategy.to_string(),
        masked_fraction,
        checkpoint_id,
        bench_id: report.bench_id.clone(),
        acc_vqa: report.accuracy(Group::Vqa),
        acc_mcvqa: report.accuracy(Group::Mcvqa),
        acc_conv: report.accuracy(Group::Conv),
        acc_mean: report.mean,
        config_fingerprint: report.config_fingerprint.clone(),
    }
}
