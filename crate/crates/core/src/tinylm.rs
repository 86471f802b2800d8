//! A tiny decoder-only transformer in pure `f64`, built for exactness rather
//! than scale.
//!
//! Design choices, all in service of deterministic, inspectable experiments:
//!
//! * **Named matrices.** Every parameter lives in a `BTreeMap<String, Mat>`
//!   (`wte`, `wpe`, `h{i}.wq/wk/wv/wo/w1/w2`, `wout`), so per-coordinate
//!   masking, importance maps, and checkpoints address weights by
//!   `(name, row, col)`. There are no biases and no learnable norm scales.
//! * **Architecture.** Token + learned position embeddings; pre-norm blocks
//!   (parameter-free RMS normalization), multi-head causal self-attention,
//!   a SiLU MLP with hidden size `4 * d_model`; a final RMS norm and an
//!   untied output projection. Matrices follow the `y = W x` convention with
//!   shape `[out, in]`, so row `r` of `wout` produces the logit of token `r`.
//! * **Uniform start.** `wout` (and the residual-writing `wo`/`w2`) start at
//!   zero, so a fresh model emits the exact uniform distribution — analytic
//!   expectations for scores on a fresh model hold to machine precision.
//! * **Sequences.** A sample is laid out as `image ++ instruction ++
//!   response ++ <eos>`; losses, distributions and perplexities run over the
//!   response span *including* the end marker, as a mean per token. The
//!   cross-entropy sequence loss therefore equals the log of the response
//!   perplexity.
//! * **Per-sample gradients.** Backpropagation is hand-written and exposed
//!   per sample ([`per_sample_grad`], [`forward_response`] +
//!   [`backward_response`]), because scoring and weight-importance need
//!   gradients of individual samples, not just batch sums.
//! * **f64 everywhere, single-threaded.** Training is deterministic to the
//!   bit for a fixed seed; checkpoints round-trip losslessly.

mod checkpoint;
mod model;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use model::{
    backward_response, forward_response, greedy_answer, init, per_sample_grad, response_dist,
    sequence_nll, Grads, Mat, ModelConfig, ModelState, ResponseForward, TokenDist,
};
pub use train::{train, Adam, StepStat, TrainHyper, TrainRun};

pub(crate) use checkpoint::{read_importance, write_importance};
pub(crate) use model::{objective_dlogit_rows, param_shapes, zero_grads};
pub(crate) use train::{batch_grad, batch_losses, check_finite, divergence_at, Loader};

use thiserror::Error;

/// Errors from model construction, inference, training, and checkpoint I/O.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },
    #[error("token id {tok} outside vocabulary of size {vocab}")]
    TokenOutOfRange { tok: u16, vocab: usize },
    #[error("sample {0} has an empty context")]
    EmptyContext(u64),
    #[error("sample {0} has an empty response")]
    EmptyResponse(u64),
    #[error("training diverged at step {step}: non-finite loss or parameters")]
    TrainingDiverged { step: u64 },
    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),
    #[error(transparent)]
    Objective(#[from] crate::objectives::ObjectiveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
