//! Prints training and scoring throughput for a given model size, so
//! experiment budgets can be chosen with real numbers.
//!
//! ```text
//! cargo run --release -p corruptlab --example throughput
//! ```

use std::time::Instant;

use corruptlab::objectives::Objective;
use corruptlab::scoring::{score_corpus, ScoreKind};
use corruptlab::synthworld::{build_corpus, CorpusSpec, Group, Targeting, Variant};
use corruptlab::tinylm::{init, train, ModelConfig, TrainHyper};
use corruptlab::tokens::vocab;

fn main() {
    let spec = CorpusSpec {
        n_samples: 512,
        cr: 0.3,
        targeting: Targeting::Uniform,
        group_mix: [(Group::Vqa, 0.4), (Group::Mcvqa, 0.3), (Group::Conv, 0.3)]
            .into_iter()
            .collect(),
        seed: 42,
        variant: Variant::Corrupted,
    };
    let corpus = build_corpus(&spec).expect("corpus");
    let max_len = corpus
        .samples
        .iter()
        .map(|s| s.context_tokens().len() + s.response.len() + 1)
        .max()
        .unwrap();
    println!("corpus: {} samples, longest sequence {max_len} tokens", corpus.len());

    for (d_model, n_layers, n_heads, max_seq) in [(24, 2, 4, 48), (32, 2, 4, 48), (48, 2, 4, 48)] {
        let config = ModelConfig {
            vocab_size: vocab().size(),
            d_model,
            n_layers,
            n_heads,
            max_seq,
        };
        let base = init(&config, 1).expect("init");
        let steps = 30u64;
        let hyper = TrainHyper { lr: 1e-3, batch_size: 32, steps, seed: 7 };
        let t0 = Instant::now();
        let run = train(&base, &corpus.samples, &Objective::Ce, &hyper).expect("train");
        let dt = t0.elapsed().as_secs_f64();
        let n_params = run.model.n_params();
        println!(
            "d={d_model} L={n_layers} ({n_params} params): {steps} steps of batch 32 in {dt:.2}s \
             = {:.1} steps/s",
            steps as f64 / dt
        );

        let t1 = Instant::now();
        let scores = score_corpus(&run.model, &corpus, ScoreKind::Ppl, None).expect("score");
        let ds = t1.elapsed().as_secs_f64();
        println!(
            "    ppl-scoring {} samples in {ds:.2}s = {:.0} samples/s",
            scores.len(),
            scores.len() as f64 / ds
        );
    }
}
