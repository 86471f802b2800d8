//! Weight-level importance and corruption isolation.
//!
//! The pipeline here answers "which individual weights did a bad training
//! set carve into the model?" in four moves:
//!
//! 1. [`snip_importance`] scores every weight by the expected absolute
//!    first-order loss change from zeroing it, `mean |W ⊙ ∇_W loss|` over a
//!    probe dataset (the classic connection-sensitivity score).
//! 2. [`topk_rowwise`] turns an importance map into a coordinate set: the
//!    top k% of each matrix row, ties broken toward the lower column index.
//! 3. [`isolate`] subtracts the set computed on clean probes from the set
//!    computed on corrupted probes, leaving coordinates that matter *only*
//!    for the corrupted behaviour.
//! 4. [`disable`] zeroes a coordinate set out of a model, leaving every
//!    other weight bit-identical.
//!
//! Rows are ranked per matrix row everywhere (embedding tables included), so
//! the procedure never favours large matrices wholesale. All set operations
//! run on ordered coordinate sets and are fully deterministic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::objectives::Objective;
use crate::rng::{mix2, rng_from, shuffle, tags};
use crate::synthworld::{Corpus, Sample};
use crate::tinylm::{
    batch_losses, param_shapes, per_sample_grad, read_importance, write_importance, zero_grads,
    Mat, ModelConfig, ModelError, ModelState,
};

/// One weight coordinate: (matrix name, row, column).
pub type Coord = (String, u32, u32);

/// An ordered set of weight coordinates.
pub type CoordSet = BTreeSet<Coord>;

/// Errors from importance scoring, masking, and their file formats.
#[derive(Debug, thiserror::Error)]
pub enum SnipError {
    #[error("importance needs a nonempty probe dataset")]
    EmptyProbe,
    #[error("percent {0} is outside (0, 100]")]
    InvalidPercent(f64),
    #[error("mask of {requested} weights exceeds the {total} parameters of the model")]
    MaskTooLarge { requested: usize, total: usize },
    #[error("coordinate ({matrix}, {row}, {col}) does not address a weight of this model")]
    InvalidCoordinate { matrix: String, row: u32, col: u32 },
    #[error("importance maps disagree on shape: {0}")]
    ShapeMismatch(String),
    #[error("corrupt mask or importance file: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where an importance map came from: which model, which probe dataset,
/// and how many samples were averaged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub checkpoint_id: String,
    pub corpus_id: String,
    pub n_samples: usize,
}

/// Per-weight importance scores, one nonnegative matrix per model matrix.
#[derive(Debug, Clone)]
pub struct ImportanceMap {
    pub config: ModelConfig,
    pub matrices: BTreeMap<String, Mat>,
    pub provenance: Provenance,
}

impl ImportanceMap {
    /// Checks the structural invariants: exactly the model's matrix
    /// inventory, and every value finite and `>= 0`.
    fn validate(&self) -> Result<(), SnipError> {
        let shapes = param_shapes(&self.config);
        if self.matrices.len() != shapes.len() {
            return Err(SnipError::CorruptFile(format!(
                "importance holds {} matrices, the model shape has {}",
                self.matrices.len(),
                shapes.len()
            )));
        }
        for (name, rows, cols) in shapes {
            let m = self.matrices.get(&name).ok_or_else(|| {
                SnipError::CorruptFile(format!("importance is missing matrix {name}"))
            })?;
            if m.rows() != rows || m.cols() != cols {
                return Err(SnipError::CorruptFile(format!(
                    "importance matrix {name} is {}x{}, the model shape needs {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
            if let Some(bad) = m.data().iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(SnipError::CorruptFile(format!(
                    "importance matrix {name} holds non-importance value {bad}"
                )));
            }
        }
        Ok(())
    }
}

/// A set of weight coordinates to zero, with its share of the total
/// parameter count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightMask {
    pub coords: CoordSet,
}

impl WeightMask {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Share of the parameter count this mask covers.
    pub fn fraction(&self, total_params: usize) -> f64 {
        self.coords.len() as f64 / total_params as f64
    }
}

/// Mean absolute elementwise product of each weight with its cross-entropy
/// gradient, averaged over the probe corpus:
/// `I = mean over samples of |W ⊙ ∇_W loss(sample)|`.
///
/// The probe must be nonempty. The result records which model and which
/// probe corpus produced it.
pub fn snip_importance(model: &ModelState, probe: &Corpus) -> Result<ImportanceMap, SnipError> {
    if probe.samples.is_empty() {
        return Err(SnipError::EmptyProbe);
    }
    let mut acc = zero_grads(&model.config);
    for sample in &probe.samples {
        let (_, grads) = per_sample_grad(model, sample, &Objective::Ce)?;
        for (name, g) in &grads {
            let w = &model.params[name];
            let a = acc.get_mut(name).expect("gradient inventory matches parameters");
            for (slot, (wv, gv)) in a.data_mut().iter_mut().zip(w.data().iter().zip(g.data())) {
                *slot += (wv * gv).abs();
            }
        }
    }
    let inv_n = 1.0 / probe.samples.len() as f64;
    for m in acc.values_mut() {
        for v in m.data_mut() {
            *v *= inv_n;
        }
    }
    Ok(ImportanceMap {
        config: model.config.clone(),
        matrices: acc,
        provenance: Provenance {
            checkpoint_id: model.content_id(),
            corpus_id: probe.id(),
            n_samples: probe.samples.len(),
        },
    })
}

/// How many of a row's `cols` entries the top `k_percent` covers:
/// `ceil(k% * cols / 100)`, computed exactly for whole-number percents.
fn rowwise_count(k_percent: f64, cols: usize) -> usize {
    if k_percent.fract() == 0.0 {
        let k = k_percent as u128;
        ((k * cols as u128).div_ceil(100)) as usize
    } else {
        (k_percent * cols as f64 / 100.0).ceil() as usize
    }
}

/// Each row's columns ordered by descending importance, ties toward the
/// lower column index. Taking a prefix of this order gives the row's top-k
/// set, so sets for growing k nest by construction.
fn row_ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order
}

/// The `ceil(k% * row_len / 100)` highest-importance coordinates of every
/// row of every matrix. `k_percent` must lie in `(0, 100]`.
pub fn topk_rowwise(imp: &ImportanceMap, k_percent: f64) -> Result<CoordSet, SnipError> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(SnipError::InvalidPercent(k_percent));
    }
    let mut set = CoordSet::new();
    for (name, m) in &imp.matrices {
        for r in 0..m.rows() {
            let keep = rowwise_count(k_percent, m.cols());
            for &c in row_ranking(m.row(r)).iter().take(keep) {
                set.insert((name.clone(), r as u32, c as u32));
            }
        }
    }
    Ok(set)
}

/// The `count` highest-importance coordinates across the whole model,
/// ties broken by ascending (matrix name, row, column).
pub fn top_global(imp: &ImportanceMap, count: usize) -> Result<WeightMask, SnipError> {
    let total: usize = imp.matrices.values().map(|m| m.rows() * m.cols()).sum();
    if count > total {
        return Err(SnipError::MaskTooLarge { requested: count, total });
    }
    let mut entries: Vec<(f64, &str, u32, u32)> = Vec::with_capacity(total);
    for (name, m) in &imp.matrices {
        for r in 0..m.rows() {
            for (c, &v) in m.row(r).iter().enumerate() {
                entries.push((v, name, r as u32, c as u32));
            }
        }
    }
    entries.sort_by(|a, b| {
        b.0.total_cmp(&a.0).then_with(|| (a.1, a.2, a.3).cmp(&(b.1, b.2, b.3)))
    });
    let coords =
        entries.into_iter().take(count).map(|(_, n, r, c)| (n.to_string(), r, c)).collect();
    Ok(WeightMask { coords })
}

/// Set difference: coordinates important on corrupted probes but not on
/// clean probes. The result is disjoint from `clean_top` by construction,
/// and that invariant is asserted on every call.
pub fn isolate(noisy_top: &CoordSet, clean_top: &CoordSet) -> WeightMask {
    let coords: CoordSet = noisy_top.difference(clean_top).cloned().collect();
    assert!(
        coords.is_disjoint(clean_top),
        "isolated set must not touch the clean-importance set"
    );
    WeightMask { coords }
}

/// Row-wise top-`q_percent` of the corrupted-probe importance minus
/// row-wise top-`p_percent` of the clean-probe importance. The two maps
/// must describe the same model shape.
pub fn isolate_maps(
    noisy: &ImportanceMap,
    q_percent: f64,
    clean: &ImportanceMap,
    p_percent: f64,
) -> Result<WeightMask, SnipError> {
    for (name, m) in &noisy.matrices {
        match clean.matrices.get(name) {
            Some(c) if c.rows() == m.rows() && c.cols() == m.cols() => {}
            Some(c) => {
                return Err(SnipError::ShapeMismatch(format!(
                    "matrix {name} is {}x{} on one side, {}x{} on the other",
                    m.rows(),
                    m.cols(),
                    c.rows(),
                    c.cols()
                )))
            }
            None => {
                return Err(SnipError::ShapeMismatch(format!(
                    "matrix {name} is missing from the clean map"
                )))
            }
        }
    }
    if clean.matrices.len() != noisy.matrices.len() {
        return Err(SnipError::ShapeMismatch(
            "the clean map holds matrices the corrupted map lacks".into(),
        ));
    }
    Ok(isolate(&topk_rowwise(noisy, q_percent)?, &topk_rowwise(clean, p_percent)?))
}

/// A copy of the model with every masked coordinate set to exactly zero.
/// All other weights are bit-identical; the input model is untouched.
pub fn disable(model: &ModelState, mask: &WeightMask) -> Result<ModelState, SnipError> {
    let mut out = model.clone();
    for (name, row, col) in &mask.coords {
        let bad = || SnipError::InvalidCoordinate { matrix: name.clone(), row: *row, col: *col };
        let m = out.params.get_mut(name).ok_or_else(bad)?;
        if (*row as usize) >= m.rows() || (*col as usize) >= m.cols() {
            return Err(bad());
        }
        *m.at_mut(*row as usize, *col as usize) = 0.0;
    }
    Ok(out)
}

/// A uniformly random coordinate set of the given size, drawn without
/// replacement from the model's weights. Deterministic in `seed`.
pub fn random_mask(model: &ModelState, count: usize, seed: u64) -> Result<WeightMask, SnipError> {
    let total = model.n_params();
    if count > total {
        return Err(SnipError::MaskTooLarge { requested: count, total });
    }
    let mut coords: Vec<Coord> = Vec::with_capacity(total);
    for (name, m) in &model.params {
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                coords.push((name.clone(), r as u32, c as u32));
            }
        }
    }
    let mut rng = rng_from(mix2(seed, tags::RANDOM_MASK));
    shuffle(&mut rng, &mut coords);
    Ok(WeightMask { coords: coords.into_iter().take(count).collect() })
}

/// Mean cross-entropy sequence loss of the model over a probe set — the
/// yardstick for comparing masks.
pub fn probe_loss(model: &ModelState, probe: &[Sample]) -> Result<f64, SnipError> {
    if probe.is_empty() {
        return Err(SnipError::EmptyProbe);
    }
    let idxs: Vec<usize> = (0..probe.len()).collect();
    let losses = batch_losses(model, probe, &idxs, &Objective::Ce)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

const MASK_HEADER: &str = "matrix,row,col";

/// Writes a mask as a `matrix,row,col` CSV, coordinates in ascending order.
pub fn write_mask(path: &Path, mask: &WeightMask) -> Result<(), SnipError> {
    let mut out = String::from(MASK_HEADER);
    out.push('\n');
    for (name, row, col) in &mask.coords {
        writeln!(out, "{name},{row},{col}").expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a mask CSV, rejecting malformed rows, duplicates, and
/// out-of-order coordinates.
pub fn read_mask(path: &Path) -> Result<WeightMask, SnipError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MASK_HEADER) {
        return Err(SnipError::CorruptFile(format!("expected header {MASK_HEADER:?}")));
    }
    let mut coords = CoordSet::new();
    let mut last: Option<Coord> = None;
    for (i, line) in lines.enumerate() {
        let mut fields = line.splitn(3, ',');
        let (name, row, col) = match (fields.next(), fields.next(), fields.next()) {
            (Some(n), Some(r), Some(c)) if !n.is_empty() => {
                let row = r.parse::<u32>().map_err(|_| {
                    SnipError::CorruptFile(format!("line {}: bad row {r:?}", i + 2))
                })?;
                let col = c.parse::<u32>().map_err(|_| {
                    SnipError::CorruptFile(format!("line {}: bad col {c:?}", i + 2))
                })?;
                (n.to_string(), row, col)
            }
            _ => {
                return Err(SnipError::CorruptFile(format!(
                    "line {}: expected matrix,row,col",
                    i + 2
                )))
            }
        };
        let coord = (name, row, col);
        if last.as_ref().is_some_and(|prev| *prev >= coord) {
            return Err(SnipError::CorruptFile(format!(
                "line {}: coordinates must be strictly ascending",
                i + 2
            )));
        }
        last = Some(coord.clone());
        coords.insert(coord);
    }
    Ok(WeightMask { coords })
}

/// Persists an importance map in the binary checkpoint container, tagged
/// so a model loader cannot mistake it for parameters.
pub fn write_importance_map(path: &Path, imp: &ImportanceMap) -> Result<(), SnipError> {
    imp.validate()?;
    let extra = vec![
        ("checkpoint_id".to_string(), imp.provenance.checkpoint_id.clone()),
        ("corpus_id".to_string(), imp.provenance.corpus_id.clone()),
        ("n_samples".to_string(), imp.provenance.n_samples.to_string()),
    ];
    write_importance(path, &imp.config, &extra, &imp.matrices)?;
    Ok(())
}

/// Reads an importance map back, re-checking shapes, nonnegativity, and
/// the provenance fields.
pub fn read_importance_map(path: &Path) -> Result<ImportanceMap, SnipError> {
    let (config, extra, matrices) = read_importance(path)?;
    let field = |key: &str| -> Result<String, SnipError> {
        extra
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| SnipError::CorruptFile(format!("missing provenance field {key}")))
    };
    let n_samples = field("n_samples")?
        .parse::<usize>()
        .map_err(|_| SnipError::CorruptFile("n_samples is not a count".into()))?;
    let imp = ImportanceMap {
        config,
        matrices,
        provenance: Provenance {
            checkpoint_id: field("checkpoint_id")?,
            corpus_id: field("corpus_id")?,
            n_samples,
        },
    };
    imp.validate()?;
    Ok(imp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal;
    use crate::synthworld::{CorpusSpec, Group, Targeting, Variant};
    use crate::tinylm::{init, response_dist, train, TrainHyper};
    use crate::tokens::Tok;

    fn micro_config() -> ModelConfig {
        ModelConfig { vocab_size: 11, d_model: 8, n_layers: 2, n_heads: 2, max_seq: 12 }
    }

    fn toy_sample(id: u64, ctx: u16, answer: u16) -> Sample {
        Sample {
            id,
            image_tokens: vec![Tok(ctx)],
            instruction: vec![Tok(3)],
            response: vec![Tok(answer)],
            clean_response: vec![Tok(answer)],
            z: 1,
            group: Group::Vqa,
        }
    }

    fn toy_corpus(n: u64) -> Corpus {
        let samples: Vec<Sample> =
            (0..n).map(|i| toy_sample(i, 1 + (i % 9) as u16, 1 + ((i * 3) % 9) as u16)).collect();
        let spec = CorpusSpec {
            n_samples: samples.len(),
            cr: 0.0,
            targeting: Targeting::Uniform,
            group_mix: [(Group::Vqa, 1.0)].into_iter().collect(),
            seed: 0,
            variant: Variant::Clean,
        };
        Corpus { spec, samples }
    }

    /// A model with every matrix (including the zero-started ones) filled
    /// with seeded Gaussian noise, so gradients reach all parameters.
    fn randomized_model(seed: u64) -> ModelState {
        let mut model = init(&micro_config(), seed).unwrap();
        let mut rng = rng_from(mix2(seed, 0x7e57));
        for m in model.params.values_mut() {
            for v in m.data_mut() {
                *v = 0.25 * normal(&mut rng);
            }
        }
        model
    }

    /// Importance map over hand-chosen small matrices, bypassing the model.
    fn map_of(mats: Vec<(&str, Mat)>) -> ImportanceMap {
        ImportanceMap {
            config: micro_config(),
            matrices: mats.into_iter().map(|(n, m)| (n.to_string(), m)).collect(),
            provenance: Provenance {
                checkpoint_id: "test".into(),
                corpus_id: "test".into(),
                n_samples: 1,
            },
        }
    }

    #[test]
    fn importance_is_the_mean_absolute_weight_gradient_product() {
        let model = randomized_model(11);
        let corpus = toy_corpus(2);
        let imp = snip_importance(&model, &corpus).unwrap();

        // Independent recomputation: average the two single-sample maps.
        for (name, m) in &imp.matrices {
            let (_, g0) = per_sample_grad(&model, &corpus.samples[0], &Objective::Ce).unwrap();
            let (_, g1) = per_sample_grad(&model, &corpus.samples[1], &Objective::Ce).unwrap();
            let w = &model.params[name];
            for i in 0..m.data().len() {
                let expect = 0.5
                    * ((w.data()[i] * g0[name].data()[i]).abs()
                        + (w.data()[i] * g1[name].data()[i]).abs());
                assert!(
                    (m.data()[i] - expect).abs() <= 1e-12,
                    "{name}[{i}]: {} vs {expect}",
                    m.data()[i]
                );
                assert!(m.data()[i] >= 0.0);
            }
        }
        assert_eq!(imp.provenance.checkpoint_id, model.content_id());
        assert_eq!(imp.provenance.corpus_id, corpus.id());
        assert_eq!(imp.provenance.n_samples, 2);
    }

    #[test]
    fn zero_weights_have_zero_importance() {
        // A fresh model zero-starts its residual writers and output head, so
        // those matrices must score exactly zero even where gradients flow.
        let model = init(&micro_config(), 5).unwrap();
        let corpus = toy_corpus(3);
        let imp = snip_importance(&model, &corpus).unwrap();
        for name in ["wout", "h0.wo", "h0.w2", "h1.wo", "h1.w2"] {
            assert!(
                imp.matrices[name].data().iter().all(|v| *v == 0.0),
                "{name} starts at zero, importance must be exactly zero"
            );
        }
    }

    #[test]
    fn importance_rejects_empty_probe() {
        let model = randomized_model(1);
        let mut corpus = toy_corpus(1);
        corpus.samples.clear();
        assert!(matches!(snip_importance(&model, &corpus), Err(SnipError::EmptyProbe)));
    }

    #[test]
    fn rowwise_topk_matches_the_sort_oracle() {
        let imp = map_of(vec![("a", Mat::from_raw(1, 4, vec![0.9, 0.1, 0.5, 0.2]))]);
        let set = topk_rowwise(&imp, 50.0).unwrap();
        let want: CoordSet =
            [("a".to_string(), 0, 0), ("a".to_string(), 0, 2)].into_iter().collect();
        assert_eq!(set, want, "top half of (0.9, 0.1, 0.5, 0.2) is columns 0 and 2");

        // k = 100 takes everything.
        assert_eq!(topk_rowwise(&imp, 100.0).unwrap().len(), 4);

        // Ties resolve toward the lower column.
        let flat = map_of(vec![("a", Mat::from_raw(1, 4, vec![0.5; 4]))]);
        let set = topk_rowwise(&flat, 50.0).unwrap();
        let want: CoordSet =
            [("a".to_string(), 0, 0), ("a".to_string(), 0, 1)].into_iter().collect();
        assert_eq!(set, want);
    }

    #[test]
    fn rowwise_counts_are_exact_ceilings() {
        assert_eq!(rowwise_count(50.0, 4), 2);
        assert_eq!(rowwise_count(25.0, 4), 1);
        assert_eq!(rowwise_count(1.0, 4), 1, "at least one per row whenever k > 0");
        assert_eq!(rowwise_count(22.0, 64), 15, "ceil(14.08)");
        assert_eq!(rowwise_count(20.0, 64), 13, "ceil(12.8)");
        assert_eq!(rowwise_count(29.0, 100), 29, "exact integer survives");
        assert_eq!(rowwise_count(100.0, 7), 7);
        assert_eq!(rowwise_count(12.5, 8), 1, "fractional percents fall back to float ceil");
    }

    #[test]
    fn rowwise_topk_grows_by_prefix() {
        let model = randomized_model(3);
        let imp = snip_importance(&model, &toy_corpus(4)).unwrap();
        let k25 = topk_rowwise(&imp, 25.0).unwrap();
        let k50 = topk_rowwise(&imp, 50.0).unwrap();
        let k100 = topk_rowwise(&imp, 100.0).unwrap();
        assert!(k25.is_subset(&k50), "k=25 is a rowwise prefix of k=50");
        assert!(k50.is_subset(&k100));
        assert_eq!(k100.len(), model.n_params());

        // Determinism: same inputs, same set.
        assert_eq!(k50, topk_rowwise(&imp, 50.0).unwrap());
    }

    #[test]
    fn topk_rejects_out_of_range_percent() {
        let imp = map_of(vec![("a", Mat::from_raw(1, 2, vec![1.0, 2.0]))]);
        assert!(matches!(topk_rowwise(&imp, 0.0), Err(SnipError::InvalidPercent(_))));
        assert!(matches!(topk_rowwise(&imp, -3.0), Err(SnipError::InvalidPercent(_))));
        assert!(matches!(topk_rowwise(&imp, 100.5), Err(SnipError::InvalidPercent(_))));
        assert!(matches!(topk_rowwise(&imp, f64::NAN), Err(SnipError::InvalidPercent(_))));
    }

    #[test]
    fn isolation_is_exact_set_difference() {
        let a = |r: u32, c: u32| ("a".to_string(), r, c);
        let noisy: CoordSet = [a(0, 0), a(0, 1), a(1, 2)].into_iter().collect();
        let clean: CoordSet = [a(0, 1), a(1, 0)].into_iter().collect();
        let mask = isolate(&noisy, &clean);
        let want: CoordSet = [a(0, 0), a(1, 2)].into_iter().collect();
        assert_eq!(mask.coords, want);
        assert!(mask.coords.is_disjoint(&clean));

        // A noisy set inside the clean set leaves nothing.
        let sub: CoordSet = [a(0, 1)].into_iter().collect();
        assert!(isolate(&sub, &clean).is_empty());
    }

    #[test]
    fn identical_maps_with_wider_clean_percent_isolate_nothing() {
        let model = randomized_model(9);
        let imp = snip_importance(&model, &toy_corpus(3)).unwrap();
        // Same map on both sides: the q% set is a rowwise prefix of the p%
        // set whenever p >= q, so the difference is empty.
        for (p, q) in [(50.0, 50.0), (50.0, 25.0), (100.0, 60.0)] {
            let mask = isolate_maps(&imp, q, &imp, p).unwrap();
            assert!(mask.is_empty(), "p={p} q={q} should isolate nothing");
        }
        // p slightly under q leaves a sliver.
        let mask = isolate_maps(&imp, 50.0, &imp, 25.0).unwrap();
        let k25 = topk_rowwise(&imp, 25.0).unwrap();
        let k50 = topk_rowwise(&imp, 50.0).unwrap();
        assert_eq!(mask.len(), k50.len() - k25.len());
    }

    #[test]
    fn isolate_maps_rejects_shape_mismatch() {
        let one = map_of(vec![("a", Mat::from_raw(1, 4, vec![0.0; 4]))]);
        let two = map_of(vec![("a", Mat::from_raw(2, 2, vec![0.0; 4]))]);
        assert!(matches!(isolate_maps(&one, 50.0, &two, 50.0), Err(SnipError::ShapeMismatch(_))));
        let extra = map_of(vec![
            ("a", Mat::from_raw(1, 4, vec![0.0; 4])),
            ("b", Mat::from_raw(1, 1, vec![0.0])),
        ]);
        assert!(matches!(isolate_maps(&one, 50.0, &extra, 50.0), Err(SnipError::ShapeMismatch(_))));
        assert!(matches!(isolate_maps(&extra, 50.0, &one, 50.0), Err(SnipError::ShapeMismatch(_))));
    }

    #[test]
    fn disable_zeroes_masked_weights_and_nothing_else() {
        let model = randomized_model(17);
        let before = model.clone();
        let mask = random_mask(&model, 40, 123).unwrap();
        let pruned = disable(&model, &mask).unwrap();

        assert_eq!(model.params, before.params, "input model is untouched");
        for (name, m) in &pruned.params {
            let orig = &model.params[name];
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    if mask.coords.contains(&(name.clone(), r as u32, c as u32)) {
                        assert_eq!(m.at(r, c), 0.0);
                    } else {
                        assert_eq!(
                            m.at(r, c).to_bits(),
                            orig.at(r, c).to_bits(),
                            "unmasked weight {name}[{r},{c}] must be bit-identical"
                        );
                    }
                }
            }
        }
        // Idempotent: disabling again changes nothing.
        let twice = disable(&pruned, &mask).unwrap();
        assert_eq!(twice.params, pruned.params);

        // Empty mask is the identity.
        let same = disable(&model, &WeightMask { coords: CoordSet::new() }).unwrap();
        assert_eq!(same.params, model.params);
    }

    #[test]
    fn disabling_the_whole_output_head_gives_uniform_predictions() {
        let model = randomized_model(23);
        let v = model.config.vocab_size;
        let d = model.config.d_model;
        let coords: CoordSet = (0..v as u32)
            .flat_map(|r| (0..d as u32).map(move |c| ("wout".to_string(), r, c)))
            .collect();
        let pruned = disable(&model, &WeightMask { coords }).unwrap();
        let dist = response_dist(&pruned, &toy_sample(0, 2, 5)).unwrap();
        for row in &dist.probs {
            for &p in row {
                assert!((p - 1.0 / v as f64).abs() < 1e-12, "zero logits mean uniform output");
            }
        }
    }

    #[test]
    fn disable_rejects_coordinates_off_the_model() {
        let model = randomized_model(2);
        let stray =
            WeightMask { coords: [("nope".to_string(), 0, 0)].into_iter().collect() };
        assert!(matches!(disable(&model, &stray), Err(SnipError::InvalidCoordinate { .. })));
        let oob = WeightMask { coords: [("wout".to_string(), 0, 999)].into_iter().collect() };
        assert!(matches!(disable(&model, &oob), Err(SnipError::InvalidCoordinate { .. })));
    }

    #[test]
    fn random_masks_are_seeded_and_sized() {
        let model = randomized_model(4);
        let a = random_mask(&model, 25, 7).unwrap();
        let b = random_mask(&model, 25, 7).unwrap();
        let c = random_mask(&model, 25, 8).unwrap();
        assert_eq!(a, b, "same seed, same mask");
        assert_ne!(a, c, "different seed, different mask");
        assert_eq!(a.len(), 25);
        let total = model.n_params();
        assert!((a.fraction(total) - 25.0 / total as f64).abs() < 1e-15);
        assert!(matches!(
            random_mask(&model, total + 1, 0),
            Err(SnipError::MaskTooLarge { .. })
        ));
    }

    #[test]
    fn top_global_orders_by_importance_then_coordinate() {
        let imp = map_of(vec![
            ("a", Mat::from_raw(1, 3, vec![0.5, 0.9, 0.5])),
            ("b", Mat::from_raw(1, 2, vec![0.9, 0.1])),
        ]);
        let mask = top_global(&imp, 3).unwrap();
        // 0.9 ties break toward matrix "a"; 0.5 ties toward column 0.
        let want: CoordSet = [
            ("a".to_string(), 0, 1),
            ("b".to_string(), 0, 0),
            ("a".to_string(), 0, 0),
        ]
        .into_iter()
        .collect();
        assert_eq!(mask.coords, want);
        assert!(matches!(top_global(&imp, 6), Err(SnipError::MaskTooLarge { .. })));
    }

    #[test]
    fn important_weights_hurt_more_than_random_ones() {
        // Train a small model to memorize, then compare probe loss after
        // zeroing the top-scored weights against five random sets of the
        // same size.
        let base = init(&micro_config(), 3).unwrap();
        let corpus = toy_corpus(8);
        let hyper = TrainHyper { lr: 1e-2, batch_size: 4, steps: 120, seed: 7 };
        let run = train(&base, &corpus.samples, &Objective::Ce, &hyper).unwrap();
        let model = run.model;

        let imp = snip_importance(&model, &corpus).unwrap();
        let count = (model.n_params() / 100).max(1);
        let snip_mask = top_global(&imp, count).unwrap();
        let snip_loss = probe_loss(&disable(&model, &snip_mask).unwrap(), &corpus.samples).unwrap();

        let base_loss = probe_loss(&model, &corpus.samples).unwrap();
        assert!(snip_loss > base_loss, "zeroing important weights must hurt");
        for seed in 0..5 {
            let rand_mask = random_mask(&model, count, seed).unwrap();
            let rand_loss =
                probe_loss(&disable(&model, &rand_mask).unwrap(), &corpus.samples).unwrap();
            assert!(
                snip_loss > rand_loss,
                "seed {seed}: top-importance zeroing ({snip_loss}) must beat random ({rand_loss})"
            );
        }
    }

    #[test]
    fn mask_csv_roundtrips_and_rejects_damage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.csv");
        let coords: CoordSet = [
            ("h0.wq".to_string(), 3, 1),
            ("h0.wq".to_string(), 3, 2),
            ("wte".to_string(), 0, 7),
        ]
        .into_iter()
        .collect();
        let mask = WeightMask { coords };
        write_mask(&path, &mask).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("matrix,row,col\n"));

        std::fs::write(&path, "matrix,row,col\nwte,0,7\nwte,0,7\n").unwrap();
        assert!(matches!(read_mask(&path), Err(SnipError::CorruptFile(_))), "duplicate");
        std::fs::write(&path, "matrix,row,col\nwte,0,7\nh0.wq,3,1\n").unwrap();
        assert!(matches!(read_mask(&path), Err(SnipError::CorruptFile(_))), "out of order");
        std::fs::write(&path, "matrix,row,col\nwte,x,7\n").unwrap();
        assert!(matches!(read_mask(&path), Err(SnipError::CorruptFile(_))), "bad row index");
        std::fs::write(&path, "row,col\n").unwrap();
        assert!(matches!(read_mask(&path), Err(SnipError::CorruptFile(_))), "bad header");

        // Empty mask still roundtrips.
        write_mask(&path, &WeightMask { coords: CoordSet::new() }).unwrap();
        assert!(read_mask(&path).unwrap().is_empty());
    }

    #[test]
    fn importance_container_roundtrips_bit_exactly() {
        let model = randomized_model(31);
        let corpus = toy_corpus(3);
        let imp = snip_importance(&model, &corpus).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imp.tlmb");
        write_importance_map(&path, &imp).unwrap();
        let back = read_importance_map(&path).unwrap();
        assert_eq!(back.provenance.checkpoint_id, imp.provenance.checkpoint_id);
        assert_eq!(back.provenance.corpus_id, imp.provenance.corpus_id);
        assert_eq!(back.provenance.n_samples, 3);
        for (name, m) in &imp.matrices {
            let b = &back.matrices[name];
            assert_eq!(m.data().len(), b.data().len());
            for (x, y) in m.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} must roundtrip bit-exactly");
            }
        }
    }

    #[test]
    fn importance_reader_rejects_model_checkpoints_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let model = randomized_model(1);

        // A model checkpoint is not an importance map.
        let model_path = dir.path().join("model.tlmb");
        crate::tinylm::write_checkpoint(&model_path, &model).unwrap();
        assert!(read_importance_map(&model_path).is_err());

        // Negative values never describe an importance.
        let mut imp = snip_importance(&model, &toy_corpus(2)).unwrap();
        *imp.matrices.get_mut("wte").unwrap().at_mut(0, 0) = -1.0;
        let bad_path = dir.path().join("bad.tlmb");
        assert!(matches!(write_importance_map(&bad_path, &imp), Err(SnipError::CorruptFile(_))));
    }
}
