//! Desk-scale laboratory for studying data corruption in instruction tuning.
//!
//! The crate builds a fully synthetic, fully deterministic pipeline around a
//! tiny autoregressive transformer:
//!
//! * [`synthworld`] — a grid-scene world that renders visual-instruction
//!   samples (VQA, multiple choice, conversation, captions, self-validation)
//!   and injects rule-based corruption into their responses.
//! * [`tinylm`] — a from-scratch decoder-only transformer in pure `f64` with
//!   per-sample gradients, deterministic training, and bit-exact checkpoints.
//! * [`objectives`] — cross-entropy plus the noise-robust generalized
//!   cross-entropy and partially-Huberised cross-entropy losses.
//! * [`scoring`] — per-sample cleanliness scores (perplexity, validation
//!   perplexity, error L2-norm, gradient norm, entropy, and a Bayes posterior
//!   over corruption).
//! * [`selection`] — percentile-threshold precision/recall curves and
//!   score-based subset selection.
//! * [`lnl`] — online sample-selection training loops (small-loss retention,
//!   cross-teaching with two models, and a consistency-regularised variant).
//! * [`snipweights`] — first-order weight importance, row-wise top-k masks,
//!   and isolation/disabling of weights implicated by corrupted data.
//!
//! Every public operation is seed-driven: the same inputs and seeds reproduce
//! every sample, every training trajectory, and every serialized artifact
//! byte-for-byte. That property is what makes the experiment harness (see the
//! companion `corruptlab-harness` crate) reliable enough to treat directional
//! findings — e.g. "corruption in one response format leaves other formats
//! almost untouched" — as regression-testable facts.

pub mod fingerprint;
pub mod lnl;
pub mod objectives;
pub mod rng;
pub mod scoring;
pub mod selection;
pub mod snipweights;
pub mod synthworld;
pub mod tinylm;
pub mod tokens;

#[cfg(doctest)]
mod book;
