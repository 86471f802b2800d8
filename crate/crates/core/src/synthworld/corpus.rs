//! Corpora: specs, deterministic construction, and JSONL (de)serialization.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sample::{incorrect_probe, queryable_slots, render_sample, selfval_pair, Group, Sample};
use super::scene::gen_scene;
use super::WorldError;
use crate::fingerprint::fingerprint;
use crate::rng::{self, tags};
use crate::synthworld::corrupt_response;

/// Which samples are eligible for corruption. `uniform` draws uniformly
/// across all corruptible samples; the `no_*` policies spare one group and
/// concentrate the same total corruption on the rest; `none` disallows
/// corruption entirely (only valid with `cr = 0` or the clean variant).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targeting {
    Uniform,
    NoVqa,
    NoMcvqa,
    NoConv,
    None,
}

impl Targeting {
    fn spared(self) -> Option<Group> {
        match self {
            Targeting::NoVqa => Some(Group::Vqa),
            Targeting::NoMcvqa => Some(Group::Mcvqa),
            Targeting::NoConv => Some(Group::Conv),
            Targeting::Uniform | Targeting::None => None,
        }
    }
}

/// Corpus variants: `corrupted` carries the injected noise, `removed`
/// contains only the clean subset of the corrupted variant (same ids), and
/// `clean` skips corruption entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Corrupted,
    Removed,
    Clean,
}

/// Seed namespace bit reserved for benchmark corpora. Training corpora must
/// not set it; benchmark builders must. Keeping the two seed ranges disjoint
/// guarantees benchmark scenes never collide with training scenes.
pub const BENCH_SEED_BIT: u64 = 1 << 63;

/// Everything needed to rebuild a corpus bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_samples: usize,
    /// Corruption ratio in `[0, 1]`: the fraction of samples whose response
    /// is replaced by a plausible but wrong one.
    pub cr: f64,
    pub targeting: Targeting,
    /// Fractions per group; must be non-negative and sum to 1.
    pub group_mix: BTreeMap<Group, f64>,
    pub seed: u64,
    pub variant: Variant,
}

/// A built corpus. `samples` preserve construction order; the `removed`
/// variant keeps the surviving samples' original ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn corrupted_count(&self) -> usize {
        self.samples.iter().filter(|s| s.z == 0).count()
    }

    pub fn group_counts(&self) -> BTreeMap<Group, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.group).or_insert(0) += 1;
        }
        counts
    }

    /// Serialized JSONL bytes of all samples, used for files and fingerprints.
    pub fn jsonl_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in &self.samples {
            serde_json::to_writer(&mut out, s).expect("sample serialization cannot fail");
            out.push(b'\n');
        }
        out
    }

    /// Content fingerprint of the serialized samples.
    pub fn id(&self) -> String {
        fingerprint(&self.jsonl_bytes())
    }
}

/// Sidecar metadata written next to each corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub spec: CorpusSpec,
    pub corpus_id: String,
    pub n_samples: usize,
    pub corrupted: usize,
    pub group_counts: BTreeMap<Group, usize>,
}

impl CorpusMeta {
    pub fn of(corpus: &Corpus) -> CorpusMeta {
        CorpusMeta {
            spec: corpus.spec.clone(),
            corpus_id: corpus.id(),
            n_samples: corpus.len(),
            corrupted: corpus.corrupted_count(),
            group_counts: corpus.group_counts(),
        }
    }
}

/// Commercial rounding shared by every "how many samples is fraction f of n"
/// decision in the workspace, so counts agree across modules.
pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

fn validate_spec(spec: &CorpusSpec) -> Result<(), WorldError> {
    if spec.n_samples == 0 {
        return Err(WorldError::InvalidSpec("n_samples must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.cr) {
        return Err(WorldError::InvalidSpec(format!(
            "cr {} outside [0, 1]",
            spec.cr
        )));
    }
    let mut sum = 0.0;
    for (g, &f) in &spec.group_mix {
        if f < 0.0 {
            return Err(WorldError::InvalidSpec(format!(
                "negative fraction {f} for group {g:?}"
            )));
        }
        sum += f;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(WorldError::InvalidSpec(format!(
            "group_mix sums to {sum}, expected 1"
        )));
    }
    let wants_corruption = spec.variant != Variant::Clean && spec.cr > 0.0;
    if wants_corruption && spec.targeting == Targeting::None {
        return Err(WorldError::InvalidSpec(
            "targeting 'none' cannot carry a positive corruption ratio".into(),
        ));
    }
    Ok(())
}

/// Assigns a group to every sample index: contiguous blocks sized by
/// cumulative rounding of the mix, in [`Group::ALL`] order. Deterministic and
/// exactly `n` in total.
fn group_assignment(spec: &CorpusSpec) -> Vec<Group> {
    let n = spec.n_samples;
    let mut out = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut prev = 0usize;
    for g in Group::ALL {
        let Some(&f) = spec.group_mix.get(&g) else {
            continue;
        };
        cum += f;
        // Force the final boundary to n so float drift cannot drop a sample.
        let boundary = if cum > 1.0 - 1e-12 {
            n
        } else {
            (cum * n as f64).round() as usize
        };
        for _ in prev..boundary {
            out.push(g);
        }
        prev = boundary;
    }
    debug_assert_eq!(out.len(), n);
    out
}

/// Within-SELFVAL subkind cycle: yes, no, yes, no, probe. Keeps yes/no pairs
/// balanced while exposing the incorrect-answer template during pre-training.
const SELFVAL_CYCLE: usize = 5;
/// Base-sample groups SELFVAL items wrap. Single-token VQA answers are the
/// only base whose yes/no judgment a model this small learns to better than
/// chance, so the whole judgment budget goes there; option-letter and
/// sentence judgments would dilute it with unlearnable gradients.
const SELFVAL_BASES: [Group; 1] = [Group::Vqa];

/// Builds a corpus from its spec. Identical specs produce byte-identical
/// corpora. Corruption assignment is drawn from a permutation seeded by
/// `(seed, targeting)` but *not* by `cr`, so the corrupted id sets of two
/// corpora that differ only in `cr` are nested — a sweep over corruption
/// ratios perturbs one growing set of samples instead of resampling.
pub fn build_corpus(spec: &CorpusSpec) -> Result<Corpus, WorldError> {
    validate_spec(spec)?;
    let groups = group_assignment(spec);

    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut selfval_seen = 0usize;
    for (i, &group) in groups.iter().enumerate() {
        let i64 = i as u64;
        let scene_seed = rng::mix3(spec.seed, tags::SCENE, i64);
        let n_objects = 1 + (rng::mix3(spec.seed, tags::OBJECTS, i64) % 3) as usize;
        let scene = gen_scene(scene_seed, n_objects)?;
        let render_seed = rng::mix3(spec.seed, tags::RENDER, i64);

        let sample = if group == Group::SelfVal {
            let j = selfval_seen;
            selfval_seen += 1;
            // Judgment pairs wrap single-object scenes: the yes/no verdict
            // skill has to form during pre-training (fine-tuning corpora never
            // carry this format), and at this model scale it only forms when
            // the scene holds one object. Multi-object judging is where the
            // skill gets *applied*, not where it can be taught.
            let scene = gen_scene(scene_seed, 1)?;
            let base_group = SELFVAL_BASES[j % SELFVAL_BASES.len()];
            let slots = queryable_slots(&scene, base_group);
            let slot = slots[(rng::mix3(spec.seed, tags::SLOT, i64) % slots.len() as u64) as usize];
            let base = render_sample(&scene, base_group, slot, render_seed, i64)?;
            let proposal_seed = rng::mix3(spec.seed, tags::PROPOSAL, i64);
            match j % SELFVAL_CYCLE {
                0 | 2 => selfval_pair(&base, false, proposal_seed, i64)?,
                1 | 3 => selfval_pair(&base, true, proposal_seed, i64)?,
                _ => incorrect_probe(&base, proposal_seed, i64)?,
            }
        } else {
            let slots = queryable_slots(&scene, group);
            let slot = slots[(rng::mix3(spec.seed, tags::SLOT, i64) % slots.len() as u64) as usize];
            render_sample(&scene, group, slot, render_seed, i64)?
        };
        samples.push(sample);
    }

    // Corruption assignment.
    if spec.variant != Variant::Clean && spec.cr > 0.0 {
        let spared = spec.targeting.spared();
        let mut eligible: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.group.corruptible() && Some(s.group) != spared)
            .map(|(i, _)| i)
            .collect();
        let want = round_half_up(spec.cr * spec.n_samples as f64);
        if want > eligible.len() {
            return Err(WorldError::InfeasibleTargeting {
                targeting: spec.targeting,
                requested_cr: spec.cr,
                max_cr: eligible.len() as f64 / spec.n_samples as f64,
            });
        }
        let mut rng = rng::rng_from(rng::mix2(spec.seed, tags::CORRUPT_ASSIGN));
        rng::shuffle(&mut rng, &mut eligible);
        for &idx in eligible.iter().take(want) {
            samples[idx] = corrupt_response(&samples[idx], spec.seed)?;
        }
    }

    if spec.variant == Variant::Removed {
        samples.retain(|s| s.z == 1);
    }

    Ok(Corpus {
        spec: spec.clone(),
        samples,
    })
}

/// Writes a corpus as JSONL plus a `.meta.json` sidecar recording the spec
/// verbatim, the content fingerprint, and group/corruption counts.
pub fn write_corpus_jsonl(corpus: &Corpus, path: &Path) -> Result<(), WorldError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&corpus.jsonl_bytes())?;
    let meta = CorpusMeta::of(corpus);
    let meta_path = meta_sidecar_path(path);
    fs::write(meta_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Path of the metadata sidecar belonging to a corpus file.
pub fn meta_sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("meta.json")
}

/// Reads a corpus written by [`write_corpus_jsonl`], re-validating sample
/// invariants and the recorded content fingerprint.
pub fn read_corpus_jsonl(path: &Path) -> Result<Corpus, WorldError> {
    let meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(meta_sidecar_path(path))?)?;
    let reader = BufReader::new(fs::File::open(path)?);
    let mut samples = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line)?;
        sample.validate()?;
        samples.push(sample);
    }
    let corpus = Corpus {
        spec: meta.spec.clone(),
        samples,
    };
    let mut seen = std::collections::HashSet::new();
    for s in &corpus.samples {
        if !seen.insert(s.id) {
            return Err(WorldError::CorruptFile(format!("duplicate sample id {}", s.id)));
        }
    }
    if corpus.id() != meta.corpus_id {
        return Err(WorldError::CorruptFile(format!(
            "content fingerprint {} does not match sidecar {}",
            corpus.id(),
            meta.corpus_id
        )));
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn sft_mix() -> BTreeMap<Group, f64> {
        BTreeMap::from([(Group::Vqa, 0.4), (Group::Mcvqa, 0.3), (Group::Conv, 0.3)])
    }

    fn spec(n: usize, cr: f64, targeting: Targeting, variant: Variant) -> CorpusSpec {
        CorpusSpec {
            n_samples: n,
            cr,
            targeting,
            group_mix: sft_mix(),
            seed: 42,
            variant,
        }
    }

    #[test]
    fn uniform_corruption_count_is_exact() {
        let c = build_corpus(&spec(10, 0.3, Targeting::Uniform, Variant::Corrupted)).unwrap();
        assert_eq!(c.corrupted_count(), 3, "n=10, cr=0.3 must corrupt exactly 3");
        assert_eq!(c.len(), 10);
    }

    #[test]
    fn group_counts_follow_the_mix() {
        let c = build_corpus(&spec(10, 0.0, Targeting::None, Variant::Clean)).unwrap();
        let counts = c.group_counts();
        assert_eq!(counts[&Group::Vqa], 4);
        assert_eq!(counts[&Group::Mcvqa], 3);
        assert_eq!(counts[&Group::Conv], 3);
    }

    #[test]
    fn removed_variant_is_the_clean_subset() {
        let corrupted = build_corpus(&spec(100, 0.5, Targeting::Uniform, Variant::Corrupted)).unwrap();
        let removed = build_corpus(&spec(100, 0.5, Targeting::Uniform, Variant::Removed)).unwrap();
        assert_eq!(removed.len(), 50);
        assert!(removed.samples.iter().all(|s| s.z == 1));
        let clean_ids: HashSet<u64> = corrupted
            .samples
            .iter()
            .filter(|s| s.z == 1)
            .map(|s| s.id)
            .collect();
        assert!(removed.samples.iter().all(|s| clean_ids.contains(&s.id)));
        assert_eq!(removed.len(), clean_ids.len());
    }

    #[test]
    fn no_vqa_targeting_spares_vqa_and_concentrates_elsewhere() {
        let c = build_corpus(&spec(100, 0.6, Targeting::NoVqa, Variant::Corrupted)).unwrap();
        assert_eq!(c.corrupted_count(), 60);
        for s in &c.samples {
            if s.group == Group::Vqa {
                assert_eq!(s.z, 1, "VQA must be spared");
            } else {
                assert_eq!(s.z, 0, "with 60 eligible and cr=0.6 all non-VQA are corrupted");
            }
        }
    }

    #[test]
    fn infeasible_targeting_reports_the_max() {
        let err = build_corpus(&spec(100, 0.7, Targeting::NoVqa, Variant::Corrupted)).unwrap_err();
        match err {
            WorldError::InfeasibleTargeting { max_cr, .. } => {
                assert!((max_cr - 0.6).abs() < 1e-12, "max_cr {max_cr} should be 0.6")
            }
            other => panic!("expected InfeasibleTargeting, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_sets_nest_across_cr() {
        let low = build_corpus(&spec(200, 0.2, Targeting::Uniform, Variant::Corrupted)).unwrap();
        let high = build_corpus(&spec(200, 0.4, Targeting::Uniform, Variant::Corrupted)).unwrap();
        let low_ids: HashSet<u64> = low.samples.iter().filter(|s| s.z == 0).map(|s| s.id).collect();
        let high_ids: HashSet<u64> =
            high.samples.iter().filter(|s| s.z == 0).map(|s| s.id).collect();
        assert!(low_ids.is_subset(&high_ids), "raising cr must only grow the corrupted set");
    }

    #[test]
    fn identical_specs_build_byte_identical_corpora() {
        let s = spec(50, 0.4, Targeting::Uniform, Variant::Corrupted);
        let a = build_corpus(&s).unwrap();
        let b = build_corpus(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.jsonl_bytes(), b.jsonl_bytes());
    }

    #[test]
    fn jsonl_roundtrip_preserves_the_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let c = build_corpus(&spec(30, 0.5, Targeting::Uniform, Variant::Corrupted)).unwrap();
        write_corpus_jsonl(&c, &path).unwrap();
        let back = read_corpus_jsonl(&path).unwrap();
        assert_eq!(back, c);
        // Sidecar records the spec verbatim.
        let meta: CorpusMeta =
            serde_json::from_str(&fs::read_to_string(meta_sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(meta.spec, c.spec);
        assert_eq!(meta.corpus_id, c.id());
    }

    #[test]
    fn tampered_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let c = build_corpus(&spec(10, 0.0, Targeting::None, Variant::Clean)).unwrap();
        write_corpus_jsonl(&c, &path).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str(&text.lines().next().unwrap().to_string());
        text.push('\n');
        fs::write(&path, text).unwrap();
        assert!(read_corpus_jsonl(&path).is_err(), "duplicate id or fingerprint must fail");
    }

    #[test]
    fn selfval_share_has_balanced_pairs_and_probes() {
        let mut mix = BTreeMap::from([(Group::Caption, 0.9), (Group::SelfVal, 0.1)]);
        let spec = CorpusSpec {
            n_samples: 100,
            cr: 0.0,
            targeting: Targeting::None,
            group_mix: std::mem::take(&mut mix),
            seed: 7,
            variant: Variant::Clean,
        };
        let c = build_corpus(&spec).unwrap();
        let sv: Vec<&Sample> = c.samples.iter().filter(|s| s.group == Group::SelfVal).collect();
        assert_eq!(sv.len(), 10);
        let v = crate::tokens::vocab();
        let yes = sv.iter().filter(|s| v.decode(&s.response) == ["yes"]).count();
        let no = sv.iter().filter(|s| v.decode(&s.response) == ["no"]).count();
        let probes = sv
            .iter()
            .filter(|s| v.name(s.instruction[0]) == "[wrong]")
            .count();
        assert_eq!((yes, no, probes), (4, 4, 2));
        assert!(c.samples.iter().all(|s| s.z == 1));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut bad_mix = spec(10, 0.0, Targeting::None, Variant::Clean);
        bad_mix.group_mix.insert(Group::Vqa, 0.3); // sums to 0.9
        assert!(matches!(build_corpus(&bad_mix), Err(WorldError::InvalidSpec(_))));

        let mut bad_cr = spec(10, 1.5, Targeting::Uniform, Variant::Corrupted);
        bad_cr.cr = 1.5;
        assert!(matches!(build_corpus(&bad_cr), Err(WorldError::InvalidSpec(_))));

        let none_with_cr = spec(10, 0.5, Targeting::None, Variant::Corrupted);
        assert!(matches!(build_corpus(&none_with_cr), Err(WorldError::InvalidSpec(_))));
    }

    #[test]
    fn corrupted_samples_keep_their_clean_twin() {
        let c = build_corpus(&spec(60, 0.5, Targeting::Uniform, Variant::Corrupted)).unwrap();
        for s in &c.samples {
            s.validate().unwrap();
            if s.z == 0 {
                assert_ne!(s.response, s.clean_response);
            }
        }
    }
}
