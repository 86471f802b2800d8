//! Deterministic minibatch training.
//!
//! One optimizer, one loop, no threads. The data loader shuffles a fresh
//! permutation per epoch from its own stream, serves consecutive batches,
//! and lets the last batch of an epoch run short, so every sample is visited
//! exactly once per epoch. All heavier training schemes (selective updates,
//! paired models) are built from the same pieces exposed here — the same
//! batches, the same gradient accumulation, the same optimizer arithmetic —
//! which is what makes "scheme X with selection disabled equals plain
//! training, bit for bit" a checkable property rather than a hope.

use serde::{Deserialize, Serialize};

use rand_chacha::ChaCha8Rng;

use crate::objectives::{Objective, ObjectiveError};
use crate::rng::{self, tags};
use crate::synthworld::Sample;

use super::model::{per_sample_grad, zero_grads, Grads, ModelState};
use super::ModelError;

/// Optimization hyperparameters. The optimizer itself (Adam with the usual
/// decay rates 0.9/0.999, epsilon 1e-8, bias correction) is fixed; only
/// these vary per run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Seeds the batch order (and nothing else).
    pub seed: u64,
}

impl TrainHyper {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ModelError::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// What one optimizer step saw: the mean loss over the samples it actually
/// trained on, and how many those were.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStat {
    pub step: u64,
    pub batch_loss: f64,
    pub kept: usize,
}

/// A finished run: the trained model and the per-step loss trace.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: ModelState,
    pub trace: Vec<StepStat>,
}

/// Epoch-shuffling batch iterator over corpus indices.
pub(crate) struct Loader {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Loader {
    /// The stream is derived from (`seed`, batch-order tag), so two loaders
    /// with the same seed and corpus size serve identical batches.
    pub(crate) fn new(n: usize, seed: u64) -> Loader {
        assert!(n > 0, "cannot iterate an empty corpus");
        let mut rng = rng::rng_from(rng::mix2(seed, tags::BATCH));
        let mut order: Vec<usize> = (0..n).collect();
        rng::shuffle(&mut rng, &mut order);
        Loader { order, pos: 0, rng }
    }

    /// Next batch of at most `batch` indices. The tail of an epoch is served
    /// short; the next call starts a freshly shuffled epoch.
    pub(crate) fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        if self.pos >= self.order.len() {
            rng::shuffle(&mut self.rng, &mut self.order);
            self.pos = 0;
        }
        let end = (self.pos + batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// Adam with bias correction. Moment tensors are parameter-shaped and keyed
/// by parameter name; `t` counts steps taken by *this* optimizer instance
/// (a fresh optimizer on a pretrained model restarts bias correction, which
/// is the intended behavior for fine-tuning phases).
pub struct Adam {
    m: Grads,
    v: Grads,
    t: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(model: &ModelState) -> Adam {
        Adam { m: zero_grads(&model.config), v: zero_grads(&model.config), t: 0 }
    }

    /// Applies one update in place: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, model: &mut ModelState, grads: &Grads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self.m.get_mut(name).expect("moment matches parameter set");
            let v = self.v.get_mut(name).expect("moment matches parameter set");
            let p = model.params.get_mut(name).expect("gradient names a parameter");
            for ((pi, gi), (mi, vi)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        model.step += 1;
    }
}

/// Per-sample losses for a batch of corpus indices, without gradients.
/// Arithmetic is identical to the loss computed alongside gradients, so the
/// two paths agree to the bit.
pub(crate) fn batch_losses(
    model: &ModelState,
    corpus: &[Sample],
    idxs: &[usize],
    objective: &Objective,
) -> Result<Vec<f64>, ModelError> {
    idxs.iter()
        .map(|&i| {
            let fwd = super::model::forward_response(model, &corpus[i])?;
            Ok(objective.sequence_objective(&fwd.dist, &fwd.targets)?)
        })
        .collect()
}

/// Mean loss and mean gradients over a batch of corpus indices.
pub(crate) fn batch_grad(
    model: &ModelState,
    corpus: &[Sample],
    idxs: &[usize],
    objective: &Objective,
) -> Result<(f64, Grads), ModelError> {
    assert!(!idxs.is_empty(), "batch_grad needs at least one sample");
    let mut total = zero_grads(&model.config);
    let mut loss_sum = 0.0;
    for &i in idxs {
        let (loss, grads) = per_sample_grad(model, &corpus[i], objective)?;
        loss_sum += loss;
        for (name, g) in &grads {
            let acc = total.get_mut(name).expect("same parameter inventory");
            for (slot, &gi) in acc.data_mut().iter_mut().zip(g.data()) {
                *slot += gi;
            }
        }
    }
    let scale = 1.0 / idxs.len() as f64;
    for mat in total.values_mut() {
        for v in mat.data_mut() {
            *v *= scale;
        }
    }
    Ok((loss_sum * scale, total))
}

/// An infinite token loss mid-training is a divergence, not a caller error.
pub(crate) fn divergence_at(step: u64, err: ModelError) -> ModelError {
    match err {
        ModelError::Objective(ObjectiveError::InfiniteLoss { .. }) => {
            ModelError::TrainingDiverged { step }
        }
        other => other,
    }
}

pub(crate) fn check_finite(model: &ModelState, loss: f64, step: u64) -> Result<(), ModelError> {
    if !loss.is_finite()
        || model.params.values().any(|m| m.data().iter().any(|v| !v.is_finite()))
    {
        return Err(ModelError::TrainingDiverged { step });
    }
    Ok(())
}

/// Plain minibatch training from `base`: `steps` Adam updates over shuffled
/// batches, every batch used in full. Returns the trained model (its `step`
/// counter advanced cumulatively) and the loss trace.
pub fn train(
    base: &ModelState,
    corpus: &[Sample],
    objective: &Objective,
    hyper: &TrainHyper,
) -> Result<TrainRun, ModelError> {
    objective.validate()?;
    hyper.validate()?;
    if corpus.is_empty() {
        return Err(ModelError::InvalidConfig("training corpus is empty".into()));
    }
    let mut model = base.clone();
    let mut adam = Adam::new(&model);
    let mut loader = Loader::new(corpus.len(), hyper.seed);
    let mut trace = Vec::with_capacity(hyper.steps as usize);
    for step in 0..hyper.steps {
        let batch = loader.next_batch(hyper.batch_size);
        let (loss, grads) =
            batch_grad(&model, corpus, &batch, objective).map_err(|e| divergence_at(step, e))?;
        adam.step(&mut model, &grads, hyper.lr);
        check_finite(&model, loss, step)?;
        trace.push(StepStat { step, batch_loss: loss, kept: batch.len() });
    }
    Ok(TrainRun { model, trace })
}
