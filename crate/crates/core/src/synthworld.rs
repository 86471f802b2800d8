//! A synthetic grid-scene world for visual-instruction data.
//!
//! Scenes are tiny "images": up to six objects with a shape, color, size and
//! position on a 4x4 grid, serialized into a canonical token sequence that
//! plays the role of vision input. From a scene the world renders instruction
//! samples in five groups:
//!
//! * `VQA` — single-attribute question, one-token answer.
//! * `MCVQA` — the same question with four lettered options, letter answer.
//! * `CONV` — "describe object k", a templated full-sentence answer.
//! * `CAPTION` — enumerate every object (pre-training only).
//! * `SELFVAL` — self-validation and incorrect-answer probes built around a
//!   base sample (pre-training only).
//!
//! The corruptor rewrites responses into *plausible but wrong* ones: answers
//! stay grammatical and in-domain, they just contradict the scene. Which
//! wrong value gets substituted is systematic per corruptor seed (a seeded
//! "confusion" within each attribute domain) rather than uniform per sample —
//! mirroring how an imperfect labeling process makes correlated mistakes, and
//! giving corruption a consistent signal that training can actually absorb.
//!
//! Corpora add the bookkeeping: group mixes, corruption ratios, targeting
//! (sparing one group), clean/corrupted/removed variants, and deterministic
//! JSONL serialization with a sidecar metadata file.

mod corpus;
mod sample;
mod scene;

pub use corpus::{
    build_corpus, read_corpus_jsonl, write_corpus_jsonl, Corpus, CorpusMeta, CorpusSpec,
    Targeting, Variant, BENCH_SEED_BIT,
};
pub(crate) use corpus::round_half_up;
pub use sample::{
    corrupt_response, incorrect_probe, queryable_slots, render_sample, selfval_pair, Group,
    Sample,
};
pub use scene::{
    attr_value_name, gen_scene, AttrKind, Color, Object, Position, Scene, Shape, Size,
    GRID_SIDE, MAX_OBJECTS,
};

use thiserror::Error;

/// Errors from world generation, rendering, corruption, and corpus I/O.
#[derive(Debug, Error)]
pub enum WorldError {
    #[error("object count {got} outside 1..={max}", max = MAX_OBJECTS)]
    InvalidObjectCount { got: usize },
    #[error("slot {slot} is not queryable for group {group:?} in a scene with {n_objects} objects")]
    InvalidSlot {
        slot: usize,
        group: Group,
        n_objects: usize,
    },
    #[error("group {0:?} does not support this operation")]
    UnsupportedGroup(Group),
    #[error("sample {0} has an empty response")]
    EmptyResponse(u64),
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error(
        "targeting {targeting:?} cannot reach corruption ratio {requested_cr}; \
         at most {max_cr} of samples are eligible"
    )]
    InfeasibleTargeting {
        targeting: Targeting,
        requested_cr: f64,
        max_cr: f64,
    },
    #[error("corpus file is inconsistent: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    UnknownToken(#[from] crate::tokens::UnknownToken),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
