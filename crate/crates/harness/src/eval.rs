//! Benchmark evaluation: greedy decoding scored with per-group exact-match
//! grammars. Deterministic — evaluating the same model on the same
//! benchmark twice yields identical reports.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use corruptlab::synthworld::{Corpus, Group, Sample, BENCH_SEED_BIT};
use corruptlab::tinylm::{greedy_answer, response_dist, ModelState};
use corruptlab::tokens::{tok, Tok};

/// Accuracy per format group, their mean, and the provenance key of the
/// producing configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_group: BTreeMap<Group, f64>,
    /// Unweighted mean over the groups present in the benchmark.
    pub mean: f64,
    pub counts: BTreeMap<Group, usize>,
    /// Content fingerprint of the benchmark corpus.
    pub bench_id: String,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn accuracy(&self, group: Group) -> f64 {
        self.per_group.get(&group).copied().unwrap_or(f64::NAN)
    }
}

/// The multiple-choice option letters, in answer-slot order.
const LETTERS: [&str; 4] = ["A", "B", "C", "D"];

/// Picks the letter with the highest next-token probability after the
/// question. Restricting the choice to the four options is what makes a
/// uniform model score at chance level (~25%) instead of zero.
fn mcvqa_letter(model: &ModelState, sample: &Sample) -> Result<Tok> {
    let dist = response_dist(model, sample)?;
    let first = &dist.probs[0];
    let mut best = tok(LETTERS[0]);
    let mut best_p = f64::NEG_INFINITY;
    for name in LETTERS {
        let t = tok(name);
        let p = first[t.0 as usize];
        if p > best_p {
            best_p = p;
            best = t;
        }
    }
    Ok(best)
}

/// Slot positions of the four attributes inside the 9-token description
/// sentence `object <d> is a <size> <color> <shape> at <pos>`.
const CONV_SLOTS: [usize; 4] = [4, 5, 6, 8];
const CONV_LEN: usize = 9;

/// Fraction of attribute slots matched. A generation that does not parse —
/// wrong length or a broken sentence frame — scores zero, never errors.
fn conv_slot_score(generated: &[Tok], truth: &[Tok]) -> f64 {
    if generated.len() != CONV_LEN || truth.len() != CONV_LEN {
        return 0.0;
    }
    let frame = [0usize, 1, 2, 3, 7];
    if frame.iter().any(|&i| generated[i] != truth[i]) {
        return 0.0;
    }
    let hits = CONV_SLOTS.iter().filter(|&&i| generated[i] == truth[i]).count();
    hits as f64 / CONV_SLOTS.len() as f64
}

fn sample_score(model: &ModelState, sample: &Sample) -> Result<f64> {
    let score = match sample.group {
        Group::Vqa | Group::Caption | Group::SelfVal => {
            let generated = greedy_answer(model, sample)?;
            (generated == sample.clean_response) as u8 as f64
        }
        Group::Mcvqa => (mcvqa_letter(model, sample)? == sample.clean_response[0]) as u8 as f64,
        Group::Conv => conv_slot_score(&greedy_answer(model, sample)?, &sample.clean_response),
    };
    Ok(score)
}

/// Greedy-decodes every benchmark item and scores it with its group's
/// exact-match grammar. The benchmark must be clean and carry the reserved
/// benchmark seed bit, which keeps its scenes disjoint from every training
/// corpus.
pub fn evaluate(model: &ModelState, bench: &Corpus, config_fingerprint: &str) -> Result<EvalReport> {
    if bench.spec.seed & BENCH_SEED_BIT == 0 {
        bail!("benchmark corpus seed lacks the reserved benchmark bit");
    }
    if let Some(bad) = bench.samples.iter().find(|s| !s.is_clean()) {
        bail!("benchmark must be clean; sample {} is corrupted", bad.id);
    }
    if bench.samples.is_empty() {
        bail!("benchmark corpus is empty");
    }
    let mut sums: BTreeMap<Group, f64> = BTreeMap::new();
    let mut counts: BTreeMap<Group, usize> = BTreeMap::new();
    for sample in &bench.samples {
        let s = sample_score(model, sample)
            .with_context(|| format!("scoring benchmark sample {}", sample.id))?;
        *sums.entry(sample.group).or_default() += s;
        *counts.entry(sample.group).or_default() += 1;
    }
    let per_group: BTreeMap<Group, f64> =
        sums.iter().map(|(g, s)| (*g, s / counts[g] as f64)).collect();
    let mean = per_group.values().sum::<f64>() / per_group.len() as f64;
    Ok(EvalReport {
        per_group,
        mean,
        counts,
        bench_id: bench.id(),
        config_fingerprint: config_fingerprint.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use corruptlab::objectives::Objective;
    use corruptlab::synthworld::{build_corpus, CorpusSpec, Targeting, Variant};
    use corruptlab::tinylm::{init, train, ModelConfig, TrainHyper};
    use corruptlab::tokens::vocab;

    fn bench_spec(per_group: usize, seed: u64) -> CorpusSpec {
        CorpusSpec {
            n_samples: 3 * per_group,
            cr: 0.0,
            targeting: Targeting::None,
            group_mix: [(Group::Vqa, 1.0 / 3.0), (Group::Mcvqa, 1.0 / 3.0), (Group::Conv, 1.0 / 3.0)]
                .into_iter()
                .collect(),
            seed: seed | BENCH_SEED_BIT,
            variant: Variant::Clean,
        }
    }

    fn model_config() -> ModelConfig {
        ModelConfig {
            vocab_size: vocab().size(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq: 48,
        }
    }

    #[test]
    fn fresh_model_scores_chance_level_on_multiple_choice() {
        // A fresh model emits the exact uniform distribution, so its letter
        // pick is constant ("A") while the correct letter is shuffled
        // per item: accuracy converges to 1/4.
        let bench = build_corpus(&bench_spec(160, 5)).unwrap();
        let model = init(&model_config(), 1).unwrap();
        let report = evaluate(&model, &bench, "cfg").unwrap();
        let mc = report.accuracy(Group::Mcvqa);
        assert!((mc - 0.25).abs() < 0.05, "chance level expected, got {mc}");
        assert_eq!(report.counts[&Group::Mcvqa], 160);
        // Free-form groups score (near) zero on a uniform model: greedy
        // decoding stops immediately at the end marker.
        assert_eq!(report.accuracy(Group::Vqa), 0.0);
        assert_eq!(report.accuracy(Group::Conv), 0.0);
    }

    #[test]
    fn memorizing_the_benchmark_scores_one() {
        // Tiny benchmark, long training: the model memorizes it outright.
        let bench = build_corpus(&bench_spec(4, 11)).unwrap();
        let base = init(&model_config(), 2).unwrap();
        let hyper = TrainHyper { lr: 5e-3, batch_size: 12, steps: 450, seed: 3 };
        let run = train(&base, &bench.samples, &Objective::Ce, &hyper).unwrap();
        let report = evaluate(&run.model, &bench, "cfg").unwrap();
        assert_eq!(report.mean, 1.0, "memorized benchmark must score 1.0: {report:?}");
    }

    #[test]
    fn evaluation_is_deterministic() {
        let bench = build_corpus(&bench_spec(12, 7)).unwrap();
        let model = init(&model_config(), 3).unwrap();
        let a = evaluate(&model, &bench, "cfg").unwrap();
        let b = evaluate(&model, &bench, "cfg").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn benchmark_hygiene_is_enforced() {
        let model = init(&model_config(), 1).unwrap();

        // Training-range seed: rejected.
        let mut spec = bench_spec(4, 9);
        spec.seed &= !BENCH_SEED_BIT;
        let sneaky = build_corpus(&spec).unwrap();
        assert!(evaluate(&model, &sneaky, "cfg").is_err());

        // Corrupted sample: rejected.
        let mut bench = build_corpus(&bench_spec(4, 9)).unwrap();
        let first = &mut bench.samples[0];
        *first = corruptlab::synthworld::corrupt_response(first, 3).unwrap();
        assert!(evaluate(&model, &bench, "cfg").is_err());
    }

    #[test]
    fn conv_scoring_counts_attribute_slots() {
        let toks = |names: &[&str]| -> Vec<Tok> { vocab().encode(names).unwrap() };
        let truth = toks(&["object", "1", "is", "a", "small", "red", "triangle", "at", "pos02"]);
        assert_eq!(conv_slot_score(&truth, &truth), 1.0);

        let mut one_off = truth.clone();
        one_off[5] = tok("blue");
        assert_eq!(conv_slot_score(&one_off, &truth), 0.75);

        // Broken frame or wrong length parse to zero.
        let mut broken = truth.clone();
        broken[2] = tok("at");
        assert_eq!(conv_slot_score(&broken, &truth), 0.0);
        assert_eq!(conv_slot_score(&truth[..8], &truth), 0.0);
    }
}
