//! Throwaway calibration probe — deleted before release.

use corruptlab::objectives::Objective;
use corruptlab::scoring::{score_corpus, ScoreKind, ScoreRecord};
use corruptlab::selection::{pr_curve, precision_at_recall};
use corruptlab::synthworld::{
    build_corpus, gen_scene, queryable_slots, render_sample, selfval_pair, Corpus, Group, Variant,
};
use corruptlab::tinylm::{forward_response, init, train, ModelState, TrainHyper};
use corruptlab_harness::config::{Experiment, ExperimentConfig};
use corruptlab_harness::pipeline::{pretrain_spec, sft_spec};

fn greedy_tok(model: &ModelState, sample: &corruptlab::synthworld::Sample) -> u16 {
    let fwd = forward_response(model, sample).unwrap();
    fwd.dist.probs[0]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0 as u16
}

fn verdict_matrix(model: &ModelState) {
    for (gname, g) in [("vqa", Group::Vqa), ("mcvqa", Group::Mcvqa), ("conv", Group::Conv)] {
        let mut line = format!("{gname:<7}");
        for nobj in 1..=3usize {
            let mut ok = 0usize;
            let mut total = 0usize;
            for s in 0..60u64 {
                let scene = gen_scene(s * 1009 + 900_000_001, nobj).unwrap();
                let slots = queryable_slots(&scene, g);
                let slot = slots[(s as usize) % slots.len()];
                let base = render_sample(&scene, g, slot, s * 7 + 1, 5_000_000 + s).unwrap();
                for wrong in [false, true] {
                    let pair = selfval_pair(&base, wrong, s * 13 + 5, 6_000_000 + s).unwrap();
                    if greedy_tok(model, &pair) == pair.response[0] {
                        ok += 1;
                    }
                    total += 1;
                }
            }
            line.push_str(&format!(" obj{nobj}={:.3}", ok as f64 / total as f64));
        }
        println!("{line}");
    }
}

fn report(name: &str, records: &[ScoreRecord], corpus: &Corpus) {
    let pr = pr_curve(records, corpus).unwrap();
    println!(
        "{name} precision@30%={:.4} precision@R0.5={:.4}",
        pr[29].precision,
        precision_at_recall(&pr, 0.5).unwrap_or(f64::NAN)
    );
}

/// Mean ln p(no) at the verdict slot, split clean vs corrupted, per group and
/// object count — shows where ranking signal survives.
fn separation(val: &[ScoreRecord], corpus: &Corpus) {
    use std::collections::BTreeMap;
    let by_id: BTreeMap<u64, &corruptlab::synthworld::Sample> =
        corpus.samples.iter().map(|s| (s.id, s)).collect();
    let mut sums: BTreeMap<(String, usize, u8), (f64, usize)> = BTreeMap::new();
    for r in val {
        let s = by_id[&r.sample_id];
        let nobj = s.image_tokens.len() / 4;
        let key = (format!("{:?}", s.group), nobj, s.z);
        let e = sums.entry(key).or_insert((0.0, 0));
        e.0 += -r.value.ln(); // ln p(no)
        e.1 += 1;
    }
    for ((g, nobj, z), (sum, n)) in sums {
        println!("  lnp(no) {g:<6} obj{nobj} z={z}: {:.4} (n={n})", sum / n as f64);
    }
}

#[test]
fn verdict_recover_probe() {
    let mut cfg = ExperimentConfig::default_for(Experiment::E5Recover);
    cfg.model.d_model = 48;
    cfg.model.n_heads = 4;
    cfg.pretrain.n_samples = 20000;
    cfg.pretrain.selfval_fraction = 0.6;
    cfg.pretrain.hyper.steps = 3500;

    let pcorpus = build_corpus(&pretrain_spec(&cfg, 1)).unwrap();
    let base = init(&cfg.model, 2).unwrap();
    let t0 = std::time::Instant::now();
    let hyper =
        TrainHyper { lr: 1e-3, batch_size: 32, steps: cfg.pretrain.hyper.steps, seed: 3 };
    let run = train(&base, &pcorpus.samples, &Objective::Ce, &hyper).unwrap();
    let pre = run.model;
    println!(
        "=== pretrain vqa-only sv=0.6 n=20000 d=48 steps=3500 loss={:.3} [{:?}]",
        run.stats.last().unwrap().loss,
        t0.elapsed()
    );
    verdict_matrix(&pre);

    let scorpus = build_corpus(&sft_spec(&cfg, 1, 0.5, cfg.sft.targeting, Variant::Corrupted))
        .unwrap();
    for (steps, lr) in [(800u64, 1e-3), (800, 5e-4), (1200, 5e-4)] {
        let hyper = TrainHyper { lr, batch_size: 32, steps, seed: 33 };
        let run = train(&pre, &scorpus.samples, &Objective::Ce, &hyper).unwrap();
        println!("--- sft steps={steps} lr={lr} (loss {:.3})", run.stats.last().unwrap().loss);
        verdict_matrix(&run.model);
        let val = score_corpus(&run.model, &scorpus, ScoreKind::ValPpl, None).unwrap();
        let ppl = score_corpus(&run.model, &scorpus, ScoreKind::Ppl, None).unwrap();
        report("val_ppl", &val, &scorpus);
        report("ppl    ", &ppl, &scorpus);
        separation(&val, &scorpus);
    }
}
