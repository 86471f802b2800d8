//! Turning scores into decisions: precision/recall sweeps and subset
//! selection.
//!
//! Scores only matter through the *order* they induce. Both operations here
//! first orient records so that **lower always means cleaner** (kinds where
//! higher is cleaner are negated), then rank ascending with the sample id as
//! the tie-breaker, which makes every downstream count deterministic.
//!
//! * [`pr_curve`] sweeps thresholds at the 1st through 100th lower
//!   percentiles of the oriented scores. At percentile `k` exactly
//!   `ceil(k * n / 100)` samples are predicted clean — the count form of
//!   "score below the k-th percentile threshold" that stays well-defined
//!   under ties. Predicted-clean vs. actually-clean yields precision and
//!   recall; at `k = 100` everything is selected, so recall is exactly 1 and
//!   precision is the clean fraction of the corpus.
//! * [`select_fraction`] keeps the cleanest-looking `round(f * n)` samples
//!   and records the decision as a named rule with the kept ids, the format
//!   consumed by the filtered fine-tuning stages.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{Orientation, ScoreRecord};
use crate::synthworld::{round_half_up, Corpus, Sample};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("no score records given")]
    EmptyInput,
    #[error("records mix score kinds or orientations")]
    MixedKinds,
    #[error("duplicate sample id {0} in score records")]
    DuplicateId(u64),
    #[error("sample id {0} has no counterpart (records and corpus must match exactly)")]
    UnknownId(u64),
    #[error("score for sample {sample_id} is not finite")]
    NonFiniteScore { sample_id: u64 },
    #[error("fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("malformed selection file: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One point of a precision/recall sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    /// Threshold percentile, 1..=100.
    pub percentile: usize,
    /// Fraction of predicted-clean samples that are actually clean.
    pub precision: f64,
    /// Fraction of actually-clean samples that were predicted clean; NaN
    /// (with `undefined` set) when the corpus has no clean samples at all.
    pub recall: f64,
    pub undefined: bool,
}

/// Validates records (one finite score per sample, a single kind) and
/// returns `(id, oriented_score, is_clean)` with lower = cleaner.
fn oriented_items(
    records: &[ScoreRecord],
    corpus: &Corpus,
) -> Result<Vec<(u64, f64, bool)>, SelectError> {
    let (kind, orientation) = match records.first() {
        Some(r) => (r.kind, r.orientation),
        None => return Err(SelectError::EmptyInput),
    };
    let mut clean_by_id = std::collections::BTreeMap::new();
    for s in &corpus.samples {
        clean_by_id.insert(s.id, s.is_clean());
    }
    let mut seen = BTreeSet::new();
    let mut items = Vec::with_capacity(records.len());
    for r in records {
        if r.kind != kind || r.orientation != orientation {
            return Err(SelectError::MixedKinds);
        }
        if !r.value.is_finite() {
            return Err(SelectError::NonFiniteScore { sample_id: r.sample_id });
        }
        if !seen.insert(r.sample_id) {
            return Err(SelectError::DuplicateId(r.sample_id));
        }
        let clean = *clean_by_id.get(&r.sample_id).ok_or(SelectError::UnknownId(r.sample_id))?;
        let oriented = match orientation {
            Orientation::LowerIsCleaner => r.value,
            Orientation::HigherIsCleaner => -r.value,
        };
        items.push((r.sample_id, oriented, clean));
    }
    if items.len() != corpus.samples.len() {
        let missing = corpus
            .samples
            .iter()
            .map(|s| s.id)
            .find(|id| !seen.contains(id))
            .expect("some corpus id is unscored");
        return Err(SelectError::UnknownId(missing));
    }
    Ok(items)
}

fn rank_ascending(items: &mut [(u64, f64, bool)]) {
    items.sort_by(|a, b| {
        a.1.partial_cmp(&b.1).expect("scores are finite").then(a.0.cmp(&b.0))
    });
}

/// Precision/recall sweep of one score kind against a labeled corpus.
/// Records and corpus must cover exactly the same sample ids.
pub fn pr_curve(records: &[ScoreRecord], corpus: &Corpus) -> Result<Vec<PrPoint>, SelectError> {
    let mut items = oriented_items(records, corpus)?;
    rank_ascending(&mut items);
    Ok(pr_from_ranked(&items))
}

/// The sweep itself, on pre-oriented (lower = cleaner), pre-ranked items of
/// `(id, score, is_clean)`. Exposed so independent oracles can target the
/// same arithmetic.
pub fn pr_from_ranked(ranked: &[(u64, f64, bool)]) -> Vec<PrPoint> {
    let n = ranked.len();
    assert!(n > 0, "ranked items must be nonempty");
    let total_clean = ranked.iter().filter(|it| it.2).count();
    // Prefix counts of clean samples: prefix_clean[m] = clean among first m.
    let mut prefix_clean = Vec::with_capacity(n + 1);
    prefix_clean.push(0usize);
    for it in ranked {
        prefix_clean.push(prefix_clean.last().unwrap() + usize::from(it.2));
    }
    (1..=100)
        .map(|percentile| {
            let kept = (percentile * n).div_ceil(100);
            let tp = prefix_clean[kept];
            let precision = tp as f64 / kept as f64;
            let (recall, undefined) = if total_clean == 0 {
                (f64::NAN, true)
            } else {
                (tp as f64 / total_clean as f64, false)
            };
            PrPoint { percentile, precision, recall, undefined }
        })
        .collect()
}

/// Precision at the first sweep point whose recall reaches `target`.
/// `None` only when recall is undefined (a corpus with no clean samples).
pub fn precision_at_recall(points: &[PrPoint], target: f64) -> Option<f64> {
    points
        .iter()
        .find(|p| !p.undefined && p.recall >= target)
        .map(|p| p.precision)
}

/// A named subset decision: which samples a rule kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub rule: String,
    /// Kept sample ids in ascending order (set semantics).
    pub kept_ids: Vec<u64>,
}

/// Keeps the cleanest-looking `round(fraction * n)` samples (ties broken by
/// ascending id). The rule string records the score kind and fraction.
pub fn select_fraction(
    records: &[ScoreRecord],
    corpus: &Corpus,
    fraction: f64,
) -> Result<Selection, SelectError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(SelectError::InvalidFraction(fraction));
    }
    let mut items = oriented_items(records, corpus)?;
    rank_ascending(&mut items);
    let keep = round_half_up(fraction * items.len() as f64);
    let mut kept_ids: Vec<u64> = items[..keep].iter().map(|it| it.0).collect();
    kept_ids.sort_unstable();
    let rule = format!("{}:keep{}", records[0].kind.as_str(), fraction);
    Ok(Selection { rule, kept_ids })
}

/// The kept samples, in corpus order. Every kept id must exist and ids must
/// be unique.
pub fn subset_corpus(corpus: &Corpus, kept_ids: &[u64]) -> Result<Vec<Sample>, SelectError> {
    let mut wanted = BTreeSet::new();
    for &id in kept_ids {
        if !wanted.insert(id) {
            return Err(SelectError::DuplicateId(id));
        }
    }
    let subset: Vec<Sample> =
        corpus.samples.iter().filter(|s| wanted.contains(&s.id)).cloned().collect();
    if subset.len() != wanted.len() {
        let have: BTreeSet<u64> = corpus.samples.iter().map(|s| s.id).collect();
        let missing = wanted.difference(&have).next().expect("some kept id is missing");
        return Err(SelectError::UnknownId(*missing));
    }
    Ok(subset)
}

/// Writes a selection as a single JSON line: `{"rule": ..., "kept_ids": [...]}`.
pub fn write_selection(path: &Path, selection: &Selection) -> Result<(), SelectError> {
    let mut out = serde_json::to_vec(selection)?;
    out.push(b'\n');
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_selection(path: &Path) -> Result<Selection, SelectError> {
    let text = std::fs::read_to_string(path)?;
    let line = text.lines().next().ok_or_else(|| SelectError::CorruptFile("empty file".into()))?;
    if text.lines().nth(1).is_some_and(|l| !l.is_empty()) {
        return Err(SelectError::CorruptFile("expected a single JSON line".into()));
    }
    let selection: Selection =
        serde_json::from_str(line).map_err(|e| SelectError::CorruptFile(e.to_string()))?;
    let ascending = selection.kept_ids.windows(2).all(|w| w[0] < w[1]);
    if !ascending {
        return Err(SelectError::CorruptFile("kept_ids must be strictly ascending".into()));
    }
    Ok(selection)
}

const PR_HEADER: &str = "percentile,precision,recall,undefined";

pub fn write_pr(path: &Path, points: &[PrPoint]) -> Result<(), SelectError> {
    let mut out = Vec::new();
    writeln!(out, "{PR_HEADER}")?;
    for p in points {
        writeln!(out, "{},{},{},{}", p.percentile, p.precision, p.recall, p.undefined)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_pr(path: &Path) -> Result<Vec<PrPoint>, SelectError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(PR_HEADER) {
        return Err(SelectError::CorruptFile("unexpected header".into()));
    }
    let mut points = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(SelectError::CorruptFile(format!("line {}: bad field count", lineno + 2)));
        }
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| SelectError::CorruptFile(format!("line {}: {e}", lineno + 2)))
        };
        points.push(PrPoint {
            percentile: fields[0]
                .parse()
                .map_err(|e| SelectError::CorruptFile(format!("line {}: {e}", lineno + 2)))?,
            precision: parse_f(fields[1])?,
            recall: parse_f(fields[2])?,
            undefined: match fields[3] {
                "true" => true,
                "false" => false,
                other => {
                    return Err(SelectError::CorruptFile(format!(
                        "line {}: bad flag {other:?}",
                        lineno + 2
                    )))
                }
            },
        });
    }
    Ok(points)
}
