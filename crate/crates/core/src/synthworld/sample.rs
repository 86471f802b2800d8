//! Instruction samples: rendering from scenes, and corruption.

use serde::{Deserialize, Serialize};

use super::scene::{attr_value_name, AttrKind, Scene};
use super::WorldError;
use crate::rng::{self, tags};
use crate::tokens::{tok, vocab, Tok};

/// Sample groups. `VQA`, `MCVQA` and `CONV` are the fine-tuning formats;
/// `CAPTION` and `SELFVAL` appear only in pre-training and probing corpora.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "VQA")]
    Vqa,
    #[serde(rename = "MCVQA")]
    Mcvqa,
    #[serde(rename = "CONV")]
    Conv,
    #[serde(rename = "SELFVAL")]
    SelfVal,
    #[serde(rename = "CAPTION")]
    Caption,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Vqa,
        Group::Mcvqa,
        Group::Conv,
        Group::SelfVal,
        Group::Caption,
    ];

    /// Groups whose responses the corruptor may rewrite. SELFVAL labels are
    /// correct by construction (a "no" about a wrong proposal is a correct
    /// answer), so they are never corrupted.
    pub fn corruptible(self) -> bool {
        !matches!(self, Group::SelfVal)
    }
}

/// One instruction sample. `z = 1` marks a clean sample; `z = 0` a corrupted
/// one. The invariant `z == 1 <=> response == clean_response` is maintained
/// by every constructor in this module and re-validated on corpus load.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SampleJson", into = "SampleJson")]
pub struct Sample {
    pub id: u64,
    pub image_tokens: Vec<Tok>,
    pub instruction: Vec<Tok>,
    pub response: Vec<Tok>,
    pub clean_response: Vec<Tok>,
    pub z: u8,
    pub group: Group,
}

impl Sample {
    pub fn is_clean(&self) -> bool {
        self.z == 1
    }

    /// The conditioning context the model sees before the response.
    pub fn context_tokens(&self) -> Vec<Tok> {
        let mut out = Vec::with_capacity(self.image_tokens.len() + self.instruction.len());
        out.extend_from_slice(&self.image_tokens);
        out.extend_from_slice(&self.instruction);
        out
    }

    /// Checks the structural invariants that corpus files must satisfy.
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.response.is_empty() || self.clean_response.is_empty() {
            return Err(WorldError::EmptyResponse(self.id));
        }
        let consistent = (self.z == 1) == (self.response == self.clean_response);
        if self.z > 1 || !consistent {
            return Err(WorldError::CorruptFile(format!(
                "sample {}: z={} disagrees with response/clean_response equality",
                self.id, self.z
            )));
        }
        Ok(())
    }
}

/// JSONL wire format: token sequences as arrays of string tokens.
#[derive(Serialize, Deserialize)]
struct SampleJson {
    id: u64,
    image_tokens: Vec<String>,
    instruction: Vec<String>,
    response: Vec<String>,
    clean_response: Vec<String>,
    z: u8,
    group: Group,
}

impl From<Sample> for SampleJson {
    fn from(s: Sample) -> SampleJson {
        let v = vocab();
        let names = |toks: &[Tok]| v.decode(toks).iter().map(|n| n.to_string()).collect();
        SampleJson {
            id: s.id,
            image_tokens: names(&s.image_tokens),
            instruction: names(&s.instruction),
            response: names(&s.response),
            clean_response: names(&s.clean_response),
            z: s.z,
            group: s.group,
        }
    }
}

impl TryFrom<SampleJson> for Sample {
    type Error = crate::tokens::UnknownToken;

    fn try_from(j: SampleJson) -> Result<Sample, Self::Error> {
        let v = vocab();
        Ok(Sample {
            id: j.id,
            image_tokens: v.encode(&j.image_tokens)?,
            instruction: v.encode(&j.instruction)?,
            response: v.encode(&j.response)?,
            clean_response: v.encode(&j.clean_response)?,
            z: j.z,
            group: j.group,
        })
    }
}

const LETTERS: [&str; 4] = ["A", "B", "C", "D"];
/// Slot layout: `slot = object_index * 4 + kind_index`, kinds in
/// [`AttrKind::ALL`] order (shape, color, size, position).
const KINDS_PER_OBJECT: usize = 4;

fn slot_parts(scene: &Scene, group: Group, slot: usize) -> Result<(usize, AttrKind), WorldError> {
    let n = scene.n_objects();
    if slot >= n * KINDS_PER_OBJECT {
        return Err(WorldError::InvalidSlot {
            slot,
            group,
            n_objects: n,
        });
    }
    Ok((slot / KINDS_PER_OBJECT, AttrKind::ALL[slot % KINDS_PER_OBJECT]))
}

/// All slots renderable for a group in this scene. MCVQA excludes size slots:
/// a two-value domain cannot fill four distinct options.
pub fn queryable_slots(scene: &Scene, group: Group) -> Vec<usize> {
    let n = scene.n_objects() * KINDS_PER_OBJECT;
    (0..n)
        .filter(|s| group != Group::Mcvqa || AttrKind::ALL[s % KINDS_PER_OBJECT] != AttrKind::Size)
        .collect()
}

fn object_digit(object_index: usize) -> Tok {
    tok(["1", "2", "3", "4", "5", "6"][object_index])
}

/// Renders one clean sample from a scene.
///
/// `slot` selects the queried attribute (see [`queryable_slots`]); for CONV
/// it selects the described object, and CAPTION ignores it beyond range
/// validation. `seed` drives option shuffling (MCVQA) and, for SELFVAL, the
/// base-sample and proposal choices. Deterministic in all arguments.
pub fn render_sample(
    scene: &Scene,
    group: Group,
    slot: usize,
    seed: u64,
    id: u64,
) -> Result<Sample, WorldError> {
    let (obj_idx, kind) = slot_parts(scene, group, slot)?;
    let obj = &scene.objects()[obj_idx];
    let image_tokens = scene.image_tokens();

    let assemble = |instruction: Vec<Tok>, response: Vec<Tok>| Sample {
        id,
        image_tokens: image_tokens.clone(),
        instruction,
        response: response.clone(),
        clean_response: response,
        z: 1,
        group,
    };

    match group {
        Group::Vqa => {
            let instruction = vec![
                tok("what"),
                tok(kind.token_name()),
                tok("of"),
                tok("object"),
                object_digit(obj_idx),
                tok("?"),
                tok("[word]"),
            ];
            let response = vec![tok(attr_value_name(obj, kind))];
            Ok(assemble(instruction, response))
        }
        Group::Mcvqa => {
            if kind == AttrKind::Size {
                return Err(WorldError::InvalidSlot {
                    slot,
                    group,
                    n_objects: scene.n_objects(),
                });
            }
            let truth = attr_value_name(obj, kind);
            let domain = kind.domain_names();
            let mut rng = rng::rng_from(rng::mix3(seed, tags::MC_OPTIONS, id));
            let mut options: Vec<&'static str> = if domain.len() == 4 {
                domain.to_vec()
            } else {
                // Position: the truth plus three distinct decoys.
                let mut decoys: Vec<&'static str> =
                    domain.iter().copied().filter(|&d| d != truth).collect();
                rng::shuffle(&mut rng, &mut decoys);
                let mut opts = vec![truth];
                opts.extend_from_slice(&decoys[..3]);
                opts
            };
            rng::shuffle(&mut rng, &mut options);
            let truth_letter = LETTERS[options.iter().position(|&o| o == truth).unwrap()];
            let mut instruction = vec![
                tok("what"),
                tok(kind.token_name()),
                tok("of"),
                tok("object"),
                object_digit(obj_idx),
                tok("?"),
            ];
            for (letter, value) in LETTERS.iter().zip(&options) {
                instruction.push(tok(letter));
                instruction.push(tok(value));
            }
            instruction.push(tok("[letter]"));
            Ok(assemble(instruction, vec![tok(truth_letter)]))
        }
        Group::Conv => {
            let instruction = vec![tok("describe"), tok("object"), object_digit(obj_idx), tok("?")];
            let response = vec![
                tok("object"),
                object_digit(obj_idx),
                tok("is"),
                tok("a"),
                tok(obj.size.token_name()),
                tok(obj.color.token_name()),
                tok(obj.shape.token_name()),
                tok("at"),
                tok(obj.pos.token_name()),
            ];
            Ok(assemble(instruction, response))
        }
        Group::Caption => {
            let instruction = vec![tok("describe"), tok("scene"), tok("?")];
            let mut response = Vec::new();
            for (i, o) in scene.objects().iter().enumerate() {
                if i > 0 {
                    response.push(tok(";"));
                }
                response.extend_from_slice(&[
                    tok("a"),
                    tok(o.size.token_name()),
                    tok(o.color.token_name()),
                    tok(o.shape.token_name()),
                    tok("at"),
                    tok(o.pos.token_name()),
                ]);
            }
            Ok(assemble(instruction, response))
        }
        Group::SelfVal => {
            let h = rng::mix2(seed, tags::SELFVAL);
            // A size slot cannot render an MCVQA base.
            let base_group = if kind == AttrKind::Size {
                [Group::Vqa, Group::Conv][(h % 2) as usize]
            } else {
                [Group::Vqa, Group::Mcvqa, Group::Conv][(h % 3) as usize]
            };
            let base = render_sample(scene, base_group, slot, rng::mix2(seed, 1), id)?;
            match (h >> 8) % 5 {
                0 | 2 => selfval_pair(&base, false, rng::mix2(seed, 2), id),
                1 | 3 => selfval_pair(&base, true, rng::mix2(seed, 2), id),
                _ => incorrect_probe(&base, rng::mix2(seed, 2), id),
            }
        }
    }
}

/// Returns the systematically confused value for `truth` within `domain`:
/// the truth shifted by a nonzero, seed-derived offset. The offset depends on
/// the seed and the domain (not on the sample), so one corruptor seed applies
/// one consistent confusion across a corpus.
fn confused(domain: &[&'static str], domain_tag: u64, truth: &str, seed: u64) -> &'static str {
    let idx = domain
        .iter()
        .position(|&d| d == truth)
        .expect("truth value must belong to its domain");
    let span = domain.len() as u64 - 1;
    let shift = 1 + (rng::mix3(seed, tags::CORRUPT_VALUE, domain_tag) % span) as usize;
    domain[(idx + shift) % domain.len()]
}

fn kind_domain_tag(kind: AttrKind) -> u64 {
    match kind {
        AttrKind::Shape => 0,
        AttrKind::Color => 1,
        AttrKind::Size => 2,
        AttrKind::Position => 3,
    }
}

/// CONV sentence layout: `[object, k, is, a, size, color, shape, at, pos]`.
const CONV_ATTR_AT: [(usize, AttrKind); 4] = [
    (4, AttrKind::Size),
    (5, AttrKind::Color),
    (6, AttrKind::Shape),
    (8, AttrKind::Position),
];
/// CAPTION per-object segment layout: `[a, size, color, shape, at, pos]`,
/// segments joined by `;` (stride 7).
const CAPTION_ATTR_AT: [(usize, AttrKind); 4] = [
    (1, AttrKind::Size),
    (2, AttrKind::Color),
    (3, AttrKind::Shape),
    (5, AttrKind::Position),
];

/// Produces the corrupted twin of a sample: same context, a plausible but
/// wrong response, `z = 0`. The wrong value is drawn from the same attribute
/// domain via the seed's systematic confusion; for CONV/CAPTION exactly one
/// attribute token is replaced (which one varies per sample). Deterministic
/// in `(sample, seed)`. The truth is always taken from `clean_response`, so
/// corrupting an already-corrupted sample is well-defined.
pub fn corrupt_response(sample: &Sample, seed: u64) -> Result<Sample, WorldError> {
    if !sample.group.corruptible() {
        return Err(WorldError::UnsupportedGroup(sample.group));
    }
    if sample.clean_response.is_empty() {
        return Err(WorldError::EmptyResponse(sample.id));
    }
    let v = vocab();
    let mut response = sample.clean_response.clone();
    match sample.group {
        Group::Vqa => {
            let kind = AttrKind::from_token_name(v.name(sample.instruction[1]))
                .expect("VQA instruction carries its attribute kind at index 1");
            let truth = v.name(response[0]);
            response[0] = tok(confused(kind.domain_names(), kind_domain_tag(kind), truth, seed));
        }
        Group::Mcvqa => {
            let truth = v.name(response[0]);
            response[0] = tok(confused(&LETTERS, 4, truth, seed));
        }
        Group::Conv => {
            let pick = (rng::mix3(seed, tags::SLOT, sample.id) % 4) as usize;
            let (pos, kind) = CONV_ATTR_AT[pick];
            let truth = v.name(response[pos]);
            response[pos] = tok(confused(kind.domain_names(), kind_domain_tag(kind), truth, seed));
        }
        Group::Caption => {
            let n_objects = (response.len() + 1) / 7;
            let h = rng::mix3(seed, tags::SLOT, sample.id);
            let obj = (h % n_objects as u64) as usize;
            let pick = ((h / n_objects as u64) % 4) as usize;
            let (off, kind) = CAPTION_ATTR_AT[pick];
            let pos = obj * 7 + off;
            let truth = v.name(response[pos]);
            response[pos] = tok(confused(kind.domain_names(), kind_domain_tag(kind), truth, seed));
        }
        Group::SelfVal => unreachable!("filtered by corruptible() above"),
    }
    Ok(Sample {
        response,
        z: 0,
        ..sample.clone()
    })
}

/// Builds a self-validation sample around a base sample: the template asks
/// whether a proposed response is correct, and the (always clean) label is
/// "yes" for the base's true response, "no" for a corrupted proposal.
pub fn selfval_pair(base: &Sample, wrong: bool, seed: u64, id: u64) -> Result<Sample, WorldError> {
    let proposal = if wrong {
        corrupt_response(base, seed)?.response
    } else {
        base.clean_response.clone()
    };
    let mut instruction = vec![tok("[query]")];
    instruction.extend_from_slice(&base.instruction);
    instruction.push(tok("[response]"));
    instruction.extend_from_slice(&proposal);
    instruction.push(tok("[correct?]"));
    let response = vec![if wrong { tok("no") } else { tok("yes") }];
    Ok(Sample {
        id,
        image_tokens: base.image_tokens.clone(),
        instruction,
        response: response.clone(),
        clean_response: response,
        z: 1,
        group: Group::SelfVal,
    })
}

/// Builds an incorrect-answer probe: the instruction explicitly asks for a
/// wrong answer, so the labeled response is a corrupted one — and the sample
/// is still clean (`z = 1`) because that is exactly what was asked.
pub fn incorrect_probe(base: &Sample, seed: u64, id: u64) -> Result<Sample, WorldError> {
    let wrong = corrupt_response(base, seed)?.response;
    let mut instruction = vec![tok("[wrong]")];
    instruction.extend_from_slice(&base.instruction);
    Ok(Sample {
        id,
        image_tokens: base.image_tokens.clone(),
        instruction,
        response: wrong.clone(),
        clean_response: wrong,
        z: 1,
        group: Group::SelfVal,
    })
}
