//! The closed token vocabulary shared by the synthetic world and the model.
//!
//! Everything in the pipeline — scene serializations, instructions,
//! responses, prompt templates — is built from this fixed list of string
//! tokens. The list is small (< 256 entries, so ids fit comfortably in a
//! `u16`) and its order is stable: token ids index the model's embedding
//! table, so reordering the list would silently invalidate every checkpoint.
//!
//! Corpus files store tokens as strings (human-readable JSONL); models work
//! with [`Tok`] ids. [`Vocab`] converts between the two.

use std::collections::HashMap;
use std::sync::OnceLock;

use thiserror::Error;

/// A token id into the global [`Vocab`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tok(pub u16);

/// The end-of-response marker. Kept at id 0 so that even micro test models
/// with a truncated vocabulary contain it.
pub const EOS: Tok = Tok(0);

#[derive(Debug, Error)]
#[error("unknown token {0:?}")]
pub struct UnknownToken(pub String);

/// Token names in id order. See the module docs for why this order is frozen.
const NAMES: &[&str] = &[
    // control / answers
    "<eos>", "yes", "no",
    // option letters (answers and option markers in multiple-choice items)
    "A", "B", "C", "D",
    // attribute values
    "circle", "square", "triangle", "star",
    "red", "green", "blue", "yellow",
    "small", "large",
    // grid positions, row-major on the 4x4 grid
    "pos00", "pos01", "pos02", "pos03",
    "pos10", "pos11", "pos12", "pos13",
    "pos20", "pos21", "pos22", "pos23",
    "pos30", "pos31", "pos32", "pos33",
    // object indices as they appear in instructions ("object 2")
    "1", "2", "3", "4", "5", "6",
    // instruction / sentence words
    "what", "of", "object", "?", "describe", "scene", "is", "a", "at", ";",
    // attribute kind words
    "shape", "color", "size", "position",
    // response-format tags appended to instructions
    "[word]", "[letter]",
    // self-validation template markers
    "[query]", "[response]", "[correct?]",
    // incorrect-answer probe marker
    "[wrong]",
];

/// Bidirectional token name/id table.
pub struct Vocab {
    names: Vec<&'static str>,
    index: HashMap<&'static str, u16>,
}

impl Vocab {
    fn build() -> Vocab {
        let names: Vec<&'static str> = NAMES.to_vec();
        let mut index = HashMap::with_capacity(names.len());
        for (i, &n) in names.iter().enumerate() {
            let clash = index.insert(n, i as u16);
            assert!(clash.is_none(), "duplicate token name {n:?}");
        }
        Vocab { names, index }
    }

    /// Number of tokens.
    pub fn size(&self) -> usize {
        self.names.len()
    }

    /// Id of a token name, if present.
    pub fn id(&self, name: &str) -> Option<Tok> {
        self.index.get(name).map(|&i| Tok(i))
    }

    /// Name of a token id. Panics on an out-of-range id (ids only come from
    /// this table or from a model whose vocabulary is a prefix of it).
    pub fn name(&self, t: Tok) -> &'static str {
        self.names[t.0 as usize]
    }

    /// Encode a slice of token names.
    pub fn encode<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<Tok>, UnknownToken> {
        names
            .iter()
            .map(|n| {
                self.id(n.as_ref())
                    .ok_or_else(|| UnknownToken(n.as_ref().to_string()))
            })
            .collect()
    }

    /// Decode token ids to names.
    pub fn decode(&self, toks: &[Tok]) -> Vec<&'static str> {
        toks.iter().map(|&t| self.name(t)).collect()
    }
}

/// The global vocabulary.
pub fn vocab() -> &'static Vocab {
    static VOCAB: OnceLock<Vocab> = OnceLock::new();
    VOCAB.get_or_init(Vocab::build)
}

/// Shorthand for looking up a token that is statically known to exist.
/// Panics on unknown names; only use with literals from [`NAMES`].
pub fn tok(name: &str) -> Tok {
    vocab()
        .id(name)
        .unwrap_or_else(|| panic!("token {name:?} is not in the vocabulary"))
}
