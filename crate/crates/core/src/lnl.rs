//! Training schemes that decide *during* training which samples to learn
//! from.
//!
//! All three schemes share the small-loss principle: samples the model(s)
//! currently find easy are more likely to be clean, so each step ranks its
//! batch by a per-sample criterion and keeps only the lowest-scoring
//! fraction. The keep fraction follows a warmup schedule
//! [`keep_ratio`]: it starts at 1, decays linearly over the first
//! `warmup_fraction` of training, and then stays at `1 - alpha` (`alpha`
//! is the fraction ultimately dropped, normally set to the expected
//! corruption rate).
//!
//! * **Small-loss self-selection** ([`mentornet_run`]) — one model keeps the
//!   samples *it* finds easy.
//! * **Co-teaching** ([`coteaching_run`]) — two models on independently
//!   shuffled loaders; each batch for one model is filtered by the *other*
//!   model's losses, and each model trains on what its peer kept. Both
//!   gradients are computed from the pre-step parameters and applied
//!   simultaneously.
//! * **Co-regularization** ([`jocor_run`]) — two models see their own
//!   batches; the per-sample criterion mixes the model's own loss with a
//!   symmetric KL consistency term between the two models' predictions,
//!   `(1 - lambda) * loss + lambda * consistency`, and the kept samples are
//!   trained with gradients of that same mixture, pulling the models toward
//!   agreement on what they learn.
//!
//! With selection disabled (`alpha = 0`) every scheme degrades to plain
//! minibatch training, bit for bit — a property the tests pin down.
//!
//! Every step appends to a selection log (which samples were in the batch,
//! their criterion values, which were kept) that serializes to CSV.

use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::objectives::Objective;
use crate::synthworld::Sample;
use crate::tinylm::{
    backward_response, batch_grad, batch_losses, check_finite, divergence_at, forward_response,
    objective_dlogit_rows, zero_grads, Adam, Loader, ModelError, ModelState, ResponseForward,
    StepStat, TokenDist, TrainHyper,
};

#[derive(Debug, Error)]
pub enum LnlError {
    #[error("invalid selection parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed selection log: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Drop-fraction schedule parameters shared by every scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmallLossConfig {
    /// Fraction of each batch dropped once warmup completes; normally the
    /// expected corruption rate.
    pub alpha: f64,
    /// Fraction of total steps over which the drop rate ramps from 0 to
    /// `alpha`.
    pub warmup_fraction: f64,
}

impl SmallLossConfig {
    fn validate(&self) -> Result<(), LnlError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LnlError::InvalidParameter(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(LnlError::InvalidParameter(format!(
                "warmup_fraction {} outside [0, 1]",
                self.warmup_fraction
            )));
        }
        Ok(())
    }
}

/// Keep ratio at `step` of `total_steps`:
/// `1 - min(step / T_k, 1) * alpha` with `T_k = max(1, round(warmup_fraction
/// * total_steps))`. Starts at 1, reaches `1 - alpha` at the end of warmup,
/// constant afterwards.
pub fn keep_ratio(step: u64, total_steps: u64, alpha: f64, warmup_fraction: f64) -> f64 {
    let t_k = (warmup_fraction * total_steps as f64 + 0.5).floor().max(1.0);
    1.0 - (step as f64 / t_k * alpha).min(alpha)
}

/// Batch positions (in original batch order) of the `ceil(r * len)` entries
/// with the smallest `(criterion, sample_id)`. At least one sample is always
/// kept so an update is defined even at `alpha = 1`.
fn smallest_by_criterion(ids: &[u64], criteria: &[f64], r: f64) -> Vec<usize> {
    let n = ids.len();
    let want = ((r * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        criteria[a]
            .partial_cmp(&criteria[b])
            .expect("criteria are finite")
            .then(ids[a].cmp(&ids[b]))
    });
    let mut chosen = vec![false; n];
    for &i in &order[..want] {
        chosen[i] = true;
    }
    (0..n).filter(|&i| chosen[i]).collect()
}

/// One step's selection decision for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionLogEntry {
    pub step: u64,
    /// `"m"` for the single-model scheme, `"f"`/`"g"` for paired schemes.
    pub model_tag: String,
    /// `(sample_id, criterion value)` for the whole batch, in batch order.
    pub batch: Vec<(u64, f64)>,
    /// Kept sample ids, ascending.
    pub kept_ids: Vec<u64>,
}

/// Result of a selective training run.
#[derive(Debug, Clone)]
pub struct LnlRun {
    /// The primary trained model (`f` for paired schemes).
    pub model: ModelState,
    /// The peer model for paired schemes.
    pub co_model: Option<ModelState>,
    /// Per-step stats of the primary model: mean loss over *kept* samples.
    pub trace: Vec<StepStat>,
    pub log: Vec<SelectionLogEntry>,
}

fn validate_common(
    corpus: &[Sample],
    objective: &Objective,
    hyper: &TrainHyper,
    select: &SmallLossConfig,
) -> Result<(), LnlError> {
    objective.validate().map_err(ModelError::from)?;
    hyper.validate()?;
    select.validate()?;
    if corpus.is_empty() {
        return Err(LnlError::InvalidParameter("training corpus is empty".into()));
    }
    Ok(())
}

fn log_entry(step: u64, tag: &str, ids: &[u64], criteria: &[f64], kept: &[usize]) -> SelectionLogEntry {
    let mut kept_ids: Vec<u64> = kept.iter().map(|&i| ids[i]).collect();
    kept_ids.sort_unstable();
    SelectionLogEntry {
        step,
        model_tag: tag.to_string(),
        batch: ids.iter().cloned().zip(criteria.iter().cloned()).collect(),
        kept_ids,
    }
}

/// Small-loss self-selection: each batch is ranked by the model's own loss
/// and only the scheduled fraction with the smallest losses is trained on.
pub fn mentornet_run(
    base: &ModelState,
    corpus: &[Sample],
    objective: &Objective,
    hyper: &TrainHyper,
    select: &SmallLossConfig,
) -> Result<LnlRun, LnlError> {
    validate_common(corpus, objective, hyper, select)?;
    let mut model = base.clone();
    let mut adam = Adam::new(&model);
    let mut loader = Loader::new(corpus.len(), hyper.seed);
    let mut trace = Vec::new();
    let mut log = Vec::new();
    for step in 0..hyper.steps {
        let batch = loader.next_batch(hyper.batch_size);
        let ids: Vec<u64> = batch.iter().map(|&i| corpus[i].id).collect();
        let losses = batch_losses(&model, corpus, &batch, objective)
            .map_err(|e| divergence_at(step, e))?;
        let r = keep_ratio(step, hyper.steps, select.alpha, select.warmup_fraction);
        let kept_pos = smallest_by_criterion(&ids, &losses, r);
        let kept_idxs: Vec<usize> = kept_pos.iter().map(|&p| batch[p]).collect();
        let (loss, grads) = batch_grad(&model, corpus, &kept_idxs, objective)
            .map_err(|e| divergence_at(step, e))?;
        adam.step(&mut model, &grads, hyper.lr);
        check_finite(&model, loss, step)?;
        log.push(log_entry(step, "m", &ids, &losses, &kept_pos));
        trace.push(StepStat { step, batch_loss: loss, kept: kept_idxs.len() });
    }
    Ok(LnlRun { model, co_model: None, trace, log })
}

/// Co-teaching: two models, two loaders. Each model's batch is filtered by
/// the *peer's* losses; both updates are computed from pre-step parameters
/// and applied together. `hyper.seed` drives the first model's loader,
/// `seed_g` the second's.
pub fn coteaching_run(
    base_f: &ModelState,
    base_g: &ModelState,
    corpus: &[Sample],
    objective: &Objective,
    hyper: &TrainHyper,
    seed_g: u64,
    select: &SmallLossConfig,
) -> Result<LnlRun, LnlError> {
    validate_common(corpus, objective, hyper, select)?;
    let mut model_f = base_f.clone();
    let mut model_g = base_g.clone();
    let mut adam_f = Adam::new(&model_f);
    let mut adam_g = Adam::new(&model_g);
    let mut loader_f = Loader::new(corpus.len(), hyper.seed);
    let mut loader_g = Loader::new(corpus.len(), seed_g);
    let mut trace = Vec::new();
    let mut log = Vec::new();
    for step in 0..hyper.steps {
        let bf = loader_f.next_batch(hyper.batch_size);
        let bg = loader_g.next_batch(hyper.batch_size);
        let ids_f: Vec<u64> = bf.iter().map(|&i| corpus[i].id).collect();
        let ids_g: Vec<u64> = bg.iter().map(|&i| corpus[i].id).collect();
        // Selection criterion comes from the peer.
        let crit_f = batch_losses(&model_g, corpus, &bf, objective)
            .map_err(|e| divergence_at(step, e))?;
        let crit_g = batch_losses(&model_f, corpus, &bg, objective)
            .map_err(|e| divergence_at(step, e))?;
        let r = keep_ratio(step, hyper.steps, select.alpha, select.warmup_fraction);
        let kept_pos_f = smallest_by_criterion(&ids_f, &crit_f, r);
        let kept_pos_g = smallest_by_criterion(&ids_g, &crit_g, r);
        let kept_f: Vec<usize> = kept_pos_f.iter().map(|&p| bf[p]).collect();
        let kept_g: Vec<usize> = kept_pos_g.iter().map(|&p| bg[p]).collect();
        // Both gradients from pre-step parameters, then both updates.
        let (loss_f, grads_f) = batch_grad(&model_f, corpus, &kept_f, objective)
            .map_err(|e| divergence_at(step, e))?;
        let (loss_g, grads_g) = batch_grad(&model_g, corpus, &kept_g, objective)
            .map_err(|e| divergence_at(step, e))?;
        adam_f.step(&mut model_f, &grads_f, hyper.lr);
        adam_g.step(&mut model_g, &grads_g, hyper.lr);
        check_finite(&model_f, loss_f, step)?;
        check_finite(&model_g, loss_g, step)?;
        log.push(log_entry(step, "f", &ids_f, &crit_f, &kept_pos_f));
        log.push(log_entry(step, "g", &ids_g, &crit_g, &kept_pos_g));
        trace.push(StepStat { step, batch_loss: loss_f, kept: kept_f.len() });
    }
    Ok(LnlRun { model: model_f, co_model: Some(model_g), trace, log })
}

/// Symmetric KL divergence between two strictly positive distributions:
/// `sum_j (p_j - q_j) * (ln p_j - ln q_j)`. Every term is nonnegative; the
/// sum is zero iff the distributions are identical.
pub fn sym_kl(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let mut total = 0.0;
    for (&pj, &qj) in p.iter().zip(q) {
        if pj == qj {
            continue; // includes the 0-0 case
        }
        total += (pj - qj) * (pj.ln() - qj.ln());
    }
    total
}

/// Per-sample consistency between two models' response distributions: the
/// symmetric KL divergence summed over response slots (a sum, not a mean, so
/// longer responses weigh more). Uses the log side of the distributions,
/// which stays finite where probabilities underflow.
pub fn jocor_consistency(df: &TokenDist, dg: &TokenDist) -> f64 {
    assert_eq!(df.len(), dg.len(), "both models scored the same response");
    let mut total = 0.0;
    for i in 0..df.len() {
        let (pf, pg) = (&df.probs[i], &dg.probs[i]);
        let (lf, lg) = (&df.logprobs[i], &dg.logprobs[i]);
        for j in 0..pf.len() {
            total += (pf[j] - pg[j]) * (lf[j] - lg[j]);
        }
    }
    total
}

/// Logit gradients of [`jocor_consistency`] at every response slot, for both
/// models. With `r_j = ln pf_j - ln pg_j` and the per-slot divergences
/// `kl_fg = sum pf r`, `kl_gf = -sum pg r`:
///
/// ```text
/// d/d logit_f_j = pf_j * (r_j + 1 - kl_fg) - pg_j
/// d/d logit_g_j = pg_j * (-r_j + 1 - kl_gf) - pf_j
/// ```
///
/// (the softmax-transpose of the plain derivative; the ratio-free form keeps
/// the arithmetic finite for confident distributions).
fn consistency_dlogit_rows(df: &TokenDist, dg: &TokenDist) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rows_f = Vec::with_capacity(df.len());
    let mut rows_g = Vec::with_capacity(df.len());
    for i in 0..df.len() {
        let (pf, pg) = (&df.probs[i], &dg.probs[i]);
        let (lf, lg) = (&df.logprobs[i], &dg.logprobs[i]);
        let n = pf.len();
        let mut kl_fg = 0.0;
        let mut kl_gf = 0.0;
        for j in 0..n {
            let r = lf[j] - lg[j];
            kl_fg += pf[j] * r;
            kl_gf -= pg[j] * r;
        }
        let mut row_f = vec![0.0; n];
        let mut row_g = vec![0.0; n];
        for j in 0..n {
            let r = lf[j] - lg[j];
            row_f[j] = pf[j] * (r + 1.0 - kl_fg) - pg[j];
            row_g[j] = pg[j] * (-r + 1.0 - kl_gf) - pf[j];
        }
        rows_f.push(row_f);
        rows_g.push(row_g);
    }
    (rows_f, rows_g)
}

/// The per-sample criterion and pre-computed forward passes for one batch
/// under both models.
struct JocorBatchEval {
    fwd_f: Vec<ResponseForward>,
    fwd_g: Vec<ResponseForward>,
    criterion: Vec<f64>,
}

/// Joint criterion `(1 - lambda) * own_loss + lambda * consistency`.
fn jocor_eval_batch(
    own: &ModelState,
    peer: &ModelState,
    corpus: &[Sample],
    batch: &[usize],
    objective: &Objective,
    lambda: f64,
) -> Result<JocorBatchEval, ModelError> {
    let mut fwd_f = Vec::with_capacity(batch.len());
    let mut fwd_g = Vec::with_capacity(batch.len());
    let mut criterion = Vec::with_capacity(batch.len());
    for &i in batch {
        let sample = &corpus[i];
        let ff = forward_response(own, sample)?;
        let fg = forward_response(peer, sample)?;
        let loss = objective.sequence_objective(&ff.dist, &ff.targets)?;
        let con = jocor_consistency(&ff.dist, &fg.dist);
        criterion.push((1.0 - lambda) * loss + lambda * con);
        fwd_f.push(ff);
        fwd_g.push(fg);
    }
    Ok(JocorBatchEval { fwd_f, fwd_g, criterion })
}

/// Gradient of the joint objective for the kept samples with respect to the
/// *own* model: mean over kept of
/// `(1 - lambda) * objective + lambda * consistency`.
fn jocor_kept_grads(
    own: &ModelState,
    eval: &JocorBatchEval,
    kept_pos: &[usize],
    objective: &Objective,
    lambda: f64,
) -> Result<(f64, crate::tinylm::Grads), ModelError> {
    let mut total = zero_grads(&own.config);
    let mut loss_sum = 0.0;
    for &p in kept_pos {
        let ff = &eval.fwd_f[p];
        let fg = &eval.fwd_g[p];
        let mut rows = objective_dlogit_rows(objective, &ff.dist, &ff.targets);
        let (con_rows, _) = consistency_dlogit_rows(&ff.dist, &fg.dist);
        for (row, con_row) in rows.iter_mut().zip(&con_rows) {
            for (slot, &c) in row.iter_mut().zip(con_row) {
                *slot = (1.0 - lambda) * *slot + lambda * c;
            }
        }
        let grads = backward_response(own, ff, &rows)?;
        for (name, g) in &grads {
            let acc = total.get_mut(name).expect("same parameter inventory");
            for (slot, &gi) in acc.data_mut().iter_mut().zip(g.data()) {
                *slot += gi;
            }
        }
        loss_sum += eval.criterion[p];
    }
    let scale = 1.0 / kept_pos.len() as f64;
    for mat in total.values_mut() {
        for v in mat.data_mut() {
            *v *= scale;
        }
    }
    Ok((loss_sum * scale, total))
}

/// Co-regularized selective training. Each model ranks its own batch by
/// `(1 - lambda) * own loss + lambda * consistency with the peer`, keeps the
/// scheduled fraction, and descends that same mixed objective. `lambda = 0`
/// reduces the criterion to the plain small-loss rule.
#[allow(clippy::too_many_arguments)]
pub fn jocor_run(
    base_f: &ModelState,
    base_g: &ModelState,
    corpus: &[Sample],
    objective: &Objective,
    hyper: &TrainHyper,
    seed_g: u64,
    select: &SmallLossConfig,
    lambda: f64,
) -> Result<LnlRun, LnlError> {
    validate_common(corpus, objective, hyper, select)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LnlError::InvalidParameter(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut model_f = base_f.clone();
    let mut model_g = base_g.clone();
    let mut adam_f = Adam::new(&model_f);
    let mut adam_g = Adam::new(&model_g);
    let mut loader_f = Loader::new(corpus.len(), hyper.seed);
    let mut loader_g = Loader::new(corpus.len(), seed_g);
    let mut trace = Vec::new();
    let mut log = Vec::new();
    for step in 0..hyper.steps {
        let bf = loader_f.next_batch(hyper.batch_size);
        let bg = loader_g.next_batch(hyper.batch_size);
        let ids_f: Vec<u64> = bf.iter().map(|&i| corpus[i].id).collect();
        let ids_g: Vec<u64> = bg.iter().map(|&i| corpus[i].id).collect();
        let eval_f = jocor_eval_batch(&model_f, &model_g, corpus, &bf, objective, lambda)
            .map_err(|e| divergence_at(step, e))?;
        let eval_g = jocor_eval_batch(&model_g, &model_f, corpus, &bg, objective, lambda)
            .map_err(|e| divergence_at(step, e))?;
        let r = keep_ratio(step, hyper.steps, select.alpha, select.warmup_fraction);
        let kept_pos_f = smallest_by_criterion(&ids_f, &eval_f.criterion, r);
        let kept_pos_g = smallest_by_criterion(&ids_g, &eval_g.criterion, r);
        let (loss_f, grads_f) =
            jocor_kept_grads(&model_f, &eval_f, &kept_pos_f, objective, lambda)
                .map_err(|e| divergence_at(step, e))?;
        let (loss_g, grads_g) =
            jocor_kept_grads(&model_g, &eval_g, &kept_pos_g, objective, lambda)
                .map_err(|e| divergence_at(step, e))?;
        adam_f.step(&mut model_f, &grads_f, hyper.lr);
        adam_g.step(&mut model_g, &grads_g, hyper.lr);
        check_finite(&model_f, loss_f, step)?;
        check_finite(&model_g, loss_g, step)?;
        log.push(log_entry(step, "f", &ids_f, &eval_f.criterion, &kept_pos_f));
        log.push(log_entry(step, "g", &ids_g, &eval_g.criterion, &kept_pos_g));
        trace.push(StepStat { step, batch_loss: loss_f, kept: kept_pos_f.len() });
    }
    Ok(LnlRun { model: model_f, co_model: Some(model_g), trace, log })
}

const LOG_HEADER: &str = "step,model_tag,kept_ids,criterion_values";

/// Writes the selection log as CSV. `kept_ids` is a space-separated id list,
/// `criterion_values` space-separated `id=value` pairs in batch order.
pub fn write_selection_log(path: &Path, entries: &[SelectionLogEntry]) -> Result<(), LnlError> {
    let mut out = Vec::new();
    writeln!(out, "{LOG_HEADER}")?;
    for e in entries {
        let kept: Vec<String> = e.kept_ids.iter().map(|id| id.to_string()).collect();
        let pairs: Vec<String> = e.batch.iter().map(|(id, v)| format!("{id}={v}")).collect();
        writeln!(out, "{},{},{},{}", e.step, e.model_tag, kept.join(" "), pairs.join(" "))?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_selection_log(path: &Path) -> Result<Vec<SelectionLogEntry>, LnlError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(LnlError::CorruptFile("unexpected header".into()));
    }
    let mut entries = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| LnlError::CorruptFile(format!("line {}: {msg}", lineno + 2));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", fields.len())));
        }
        let step = fields[0].parse::<u64>().map_err(|e| bad(format!("bad step: {e}")))?;
        let model_tag = fields[1].to_string();
        let kept_ids = fields[2]
            .split_ascii_whitespace()
            .map(|s| s.parse::<u64>().map_err(|e| bad(format!("bad kept id: {e}"))))
            .collect::<Result<Vec<u64>, _>>()?;
        let mut batch = Vec::new();
        for pair in fields[3].split_ascii_whitespace() {
            let (id, v) = pair
                .split_once('=')
                .ok_or_else(|| bad(format!("criterion pair {pair:?} lacks '='")))?;
            batch.push((
                id.parse::<u64>().map_err(|e| bad(format!("bad id: {e}")))?,
                v.parse::<f64>().map_err(|e| bad(format!("bad value: {e}")))?,
            ));
        }
        entries.push(SelectionLogEntry { step, model_tag, kept_ids, batch });
    }
    Ok(entries)
}
