//! Per-sample cleanliness scores.
//!
//! Every score is a single `f64` per sample computed from a trained model,
//! plus an **orientation** saying which direction means "cleaner". The six
//! kinds:
//!
//! * `ppl` — response perplexity `exp(mean NLL)` over the response span
//!   (end marker included). Lower is cleaner: a model fit on mostly-clean
//!   data finds corrupted answers surprising.
//! * `val_ppl` — self-validation. The sample is re-rendered as a judgment
//!   task (`[query] instruction [response] proposal [correct?]`) and the
//!   score is the reciprocal of the probability of `no` at the verdict
//!   position. *Higher* is cleaner: a confident `no` (small reciprocal)
//!   means the model judges the proposal wrong.
//! * `el2n` — mean L2 distance between the predicted distribution and the
//!   one-hot target, in `[0, sqrt(2)]`. Lower is cleaner.
//! * `grad_norm` — L2 norm of the sample's cross-entropy gradient over all
//!   parameters (always cross-entropy, whatever objective trained the
//!   model). Lower is cleaner.
//! * `entropy` — mean predictive entropy over the response span. Lower is
//!   cleaner.
//! * `posterior` — the probability the sample is clean, from the two
//!   likelihoods in [`incorrect_likelihood`] and a prior corruption rate via
//!   [`bayes_posterior`]. Higher is cleaner.
//!
//! Score records carry the fingerprints of the model checkpoint and corpus
//! that produced them, and round-trip losslessly through CSV.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthworld::{Corpus, Sample};
use crate::tinylm::{
    per_sample_grad, response_dist, sequence_nll, ModelError, ModelState, TokenDist,
};
use crate::tokens::tok;
use crate::objectives::Objective;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("prior corruption rate {c} outside [0, 1]")]
    InvalidPrior { c: f64 },
    #[error("conditional likelihood is zero; the posterior is undefined")]
    DegenerateConditional,
    #[error("scoring kind {0} needs a prior corruption rate")]
    MissingPrior(&'static str),
    #[error("malformed score file: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which direction of a score means "cleaner".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    LowerIsCleaner,
    HigherIsCleaner,
}

impl Orientation {
    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::LowerIsCleaner => "lower_is_cleaner",
            Orientation::HigherIsCleaner => "higher_is_cleaner",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ScoreError> {
        match s {
            "lower_is_cleaner" => Ok(Orientation::LowerIsCleaner),
            "higher_is_cleaner" => Ok(Orientation::HigherIsCleaner),
            other => Err(ScoreError::CorruptFile(format!("unknown orientation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Ppl,
    ValPpl,
    El2n,
    GradNorm,
    Entropy,
    Posterior,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 6] = [
        ScoreKind::Ppl,
        ScoreKind::ValPpl,
        ScoreKind::El2n,
        ScoreKind::GradNorm,
        ScoreKind::Entropy,
        ScoreKind::Posterior,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Ppl => "ppl",
            ScoreKind::ValPpl => "val_ppl",
            ScoreKind::El2n => "el2n",
            ScoreKind::GradNorm => "grad_norm",
            ScoreKind::Entropy => "entropy",
            ScoreKind::Posterior => "posterior",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ScoreError> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ScoreError::CorruptFile(format!("unknown score kind {s:?}")))
    }

    pub fn orientation(self) -> Orientation {
        match self {
            ScoreKind::ValPpl | ScoreKind::Posterior => Orientation::HigherIsCleaner,
            _ => Orientation::LowerIsCleaner,
        }
    }
}

/// One score with full provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: u64,
    pub kind: ScoreKind,
    pub value: f64,
    pub orientation: Orientation,
    pub model_checkpoint_id: String,
    pub corpus_id: String,
}

/// Response perplexity: `exp` of the mean negative log-likelihood.
pub fn ppl(model: &ModelState, sample: &Sample) -> Result<f64, ScoreError> {
    Ok(sequence_nll(model, sample)?.exp())
}

/// Mean L2 distance between predicted distributions and one-hot targets.
pub fn el2n_from(dist: &TokenDist, targets: &[u16]) -> f64 {
    assert_eq!(dist.len(), targets.len(), "one distribution row per target");
    assert!(!targets.is_empty());
    let mut total = 0.0;
    for (row, &t) in dist.probs.iter().zip(targets) {
        let mut sq = 0.0;
        for (j, &p) in row.iter().enumerate() {
            let diff = if j == t as usize { p - 1.0 } else { p };
            sq += diff * diff;
        }
        total += sq.sqrt();
    }
    total / targets.len() as f64
}

pub fn el2n(model: &ModelState, sample: &Sample) -> Result<f64, ScoreError> {
    let fwd = crate::tinylm::forward_response(model, sample)?;
    Ok(el2n_from(&fwd.dist, &fwd.targets))
}

/// Mean predictive entropy over the response span (target-free).
pub fn entropy_from(dist: &TokenDist) -> f64 {
    assert!(!dist.is_empty());
    let mut total = 0.0;
    for (prow, lrow) in dist.probs.iter().zip(&dist.logprobs) {
        let mut h = 0.0;
        for (&p, &lp) in prow.iter().zip(lrow) {
            if p > 0.0 {
                h -= p * lp;
            }
        }
        total += h;
    }
    total / dist.len() as f64
}

pub fn entropy(model: &ModelState, sample: &Sample) -> Result<f64, ScoreError> {
    Ok(entropy_from(&response_dist(model, sample)?))
}

/// L2 norm of the per-sample **cross-entropy** gradient over every
/// parameter. Cross-entropy regardless of the training objective, so the
/// score means the same thing for every trained model.
pub fn grad_norm(model: &ModelState, sample: &Sample) -> Result<f64, ScoreError> {
    let (_, grads) = per_sample_grad(model, sample, &Objective::Ce)?;
    let mut sq = 0.0;
    for mat in grads.values() {
        for &g in mat.data() {
            sq += g * g;
        }
    }
    Ok(sq.sqrt())
}

/// The judgment-task rendering of a sample: the original instruction and its
/// response wrapped in the self-validation template, with a placeholder
/// one-token response (only the distribution at the verdict position is ever
/// used).
fn val_template(sample: &Sample) -> Sample {
    let mut instruction = vec![tok("[query]")];
    instruction.extend_from_slice(&sample.instruction);
    instruction.push(tok("[response]"));
    instruction.extend_from_slice(&sample.response);
    instruction.push(tok("[correct?]"));
    Sample {
        id: sample.id,
        image_tokens: sample.image_tokens.clone(),
        instruction,
        response: vec![tok("no")],
        clean_response: vec![tok("no")],
        z: 1,
        group: sample.group,
    }
}

/// Self-validation score: reciprocal of the probability the model puts on
/// `no` at the verdict position of the judgment template. Higher is cleaner.
pub fn val_ppl(model: &ModelState, sample: &Sample) -> Result<f64, ScoreError> {
    let judged = val_template(sample);
    let dist = response_dist(model, &judged)?;
    let no_id = tok("no").0 as usize;
    // exp(-ln p) rather than 1/p: finite arithmetic on the log side.
    Ok((-dist.logprobs[0][no_id]).exp())
}

/// Geometric-mean per-token likelihood of the response under (a) the
/// sample's own context and (b) the context with the instruction prefixed by
/// the wrong-answer marker the model saw on deliberately incorrect
/// demonstrations during pretraining.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IncorrectLikelihood {
    /// `p(response | context marked wrong)`, per token.
    pub incorrect: f64,
    /// `p(response | context)`, per token.
    pub conditional: f64,
}

pub fn incorrect_likelihood(
    model: &ModelState,
    sample: &Sample,
) -> Result<IncorrectLikelihood, ScoreError> {
    let conditional = (-sequence_nll(model, sample)?).exp();
    let mut marked = sample.clone();
    let mut instruction = vec![tok("[wrong]")];
    instruction.extend_from_slice(&sample.instruction);
    marked.instruction = instruction;
    let incorrect = (-sequence_nll(model, &marked)?).exp();
    Ok(IncorrectLikelihood { incorrect, conditional })
}

/// A clean-probability with a flag recording whether the raw value had to be
/// clamped into `[0, 1]` (likelihood ratios from an imperfect model can push
/// it outside).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub value: f64,
    pub clamped: bool,
}

/// Probability the sample is clean given the two likelihoods and a prior
/// corruption rate: `1 - prior * incorrect / conditional`, clamped.
pub fn bayes_posterior(
    likelihood: IncorrectLikelihood,
    prior_corrupted: f64,
) -> Result<Posterior, ScoreError> {
    if !(0.0..=1.0).contains(&prior_corrupted) {
        return Err(ScoreError::InvalidPrior { c: prior_corrupted });
    }
    if likelihood.conditional <= 0.0 {
        return Err(ScoreError::DegenerateConditional);
    }
    let raw = 1.0 - prior_corrupted * likelihood.incorrect / likelihood.conditional;
    let value = raw.clamp(0.0, 1.0);
    Ok(Posterior { value, clamped: value != raw })
}

pub fn posterior(
    model: &ModelState,
    sample: &Sample,
    prior_corrupted: f64,
) -> Result<Posterior, ScoreError> {
    bayes_posterior(incorrect_likelihood(model, sample)?, prior_corrupted)
}

/// Scores every sample of a corpus with one kind. `prior_corrupted` is only
/// consulted by the posterior kind (and required there). Records carry the
/// model and corpus fingerprints.
pub fn score_corpus(
    model: &ModelState,
    corpus: &Corpus,
    kind: ScoreKind,
    prior_corrupted: Option<f64>,
) -> Result<Vec<ScoreRecord>, ScoreError> {
    let model_checkpoint_id = model.content_id();
    let corpus_id = corpus.id();
    let mut records = Vec::with_capacity(corpus.samples.len());
    for sample in &corpus.samples {
        let value = match kind {
            ScoreKind::Ppl => ppl(model, sample)?,
            ScoreKind::ValPpl => val_ppl(model, sample)?,
            ScoreKind::El2n => el2n(model, sample)?,
            ScoreKind::GradNorm => grad_norm(model, sample)?,
            ScoreKind::Entropy => entropy(model, sample)?,
            ScoreKind::Posterior => {
                let c = prior_corrupted.ok_or(ScoreError::MissingPrior("posterior"))?;
                posterior(model, sample, c)?.value
            }
        };
        records.push(ScoreRecord {
            sample_id: sample.id,
            kind,
            value,
            orientation: kind.orientation(),
            model_checkpoint_id: model_checkpoint_id.clone(),
            corpus_id: corpus_id.clone(),
        });
    }
    Ok(records)
}

const CSV_HEADER: &str = "sample_id,kind,value,orientation,model_checkpoint_id,corpus_id";

/// Writes score records as CSV. Values are printed with the shortest
/// representation that parses back to the identical `f64`, so a write/read
/// cycle is lossless.
pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<(), ScoreError> {
    let mut out = Vec::new();
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.sample_id,
            r.kind.as_str(),
            r.value,
            r.orientation.as_str(),
            r.model_checkpoint_id,
            r.corpus_id
        )?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>, ScoreError> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h == CSV_HEADER => {}
        Some(Ok(h)) => {
            return Err(ScoreError::CorruptFile(format!("unexpected header {h:?}")));
        }
        Some(Err(e)) => return Err(e.into()),
        None => return Err(ScoreError::CorruptFile("empty file".into())),
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(ScoreError::CorruptFile(format!(
                "line {}: expected 6 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let sample_id = fields[0].parse::<u64>().map_err(|e| {
            ScoreError::CorruptFile(format!("line {}: bad sample id: {e}", lineno + 2))
        })?;
        let kind = ScoreKind::parse(fields[1])?;
        let value = fields[2].parse::<f64>().map_err(|e| {
            ScoreError::CorruptFile(format!("line {}: bad value: {e}", lineno + 2))
        })?;
        let orientation = Orientation::parse(fields[3])?;
        if orientation != kind.orientation() {
            return Err(ScoreError::CorruptFile(format!(
                "line {}: orientation {} contradicts kind {}",
                lineno + 2,
                orientation.as_str(),
                kind.as_str()
            )));
        }
        records.push(ScoreRecord {
            sample_id,
            kind,
            value,
            orientation,
            model_checkpoint_id: fields[4].to_string(),
            corpus_id: fields[5].to_string(),
        });
    }
    Ok(records)
}
