//! Experiment configuration: a TOML-backed description of everything a run
//! needs — sizes, hyper-parameters, grids, seeds, output layout. Configs
//! round-trip losslessly through their file form, and a run is fully
//! determined by (config, seed), so the config fingerprint doubles as the
//! provenance key in every emitted report.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use corruptlab::fingerprint::fingerprint;
use corruptlab::objectives::Objective;
use corruptlab::scoring::ScoreKind;
use corruptlab::synthworld::{Group, Targeting, BENCH_SEED_BIT};
use corruptlab::tinylm::ModelConfig;
use corruptlab::tokens::vocab;

/// The five standard experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Experiment {
    /// Corruption-ratio sweep: corrupted vs removed variants over a cr grid.
    #[serde(rename = "E1_sweep")]
    E1Sweep,
    /// Group-targeted corruption at fixed cr, plus a clean reference run.
    #[serde(rename = "E2_targeted")]
    E2Targeted,
    /// Weight-importance isolation and disabling on the corrupted model.
    #[serde(rename = "E3_prune")]
    E3Prune,
    /// Corruption detection: PR curves of scores under models trained at
    /// increasing cr.
    #[serde(rename = "E4_detect")]
    E4Detect,
    /// Recovery comparison: robust objectives, online selection, and
    /// score-based further fine-tuning against ground truth.
    #[serde(rename = "E5_recover")]
    E5Recover,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::E1Sweep,
        Experiment::E2Targeted,
        Experiment::E3Prune,
        Experiment::E4Detect,
        Experiment::E5Recover,
    ];

    /// Short tag used in file names and CLI arguments.
    pub fn tag(self) -> &'static str {
        match self {
            Experiment::E1Sweep => "E1",
            Experiment::E2Targeted => "E2",
            Experiment::E3Prune => "E3",
            Experiment::E4Detect => "E4",
            Experiment::E5Recover => "E5",
        }
    }

    fn full_name(self) -> &'static str {
        match self {
            Experiment::E1Sweep => "E1_sweep",
            Experiment::E2Targeted => "E2_targeted",
            Experiment::E3Prune => "E3_prune",
            Experiment::E4Detect => "E4_detect",
            Experiment::E5Recover => "E5_recover",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.full_name())
    }
}

impl FromStr for Experiment {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Experiment> {
        for e in Experiment::ALL {
            if s.eq_ignore_ascii_case(e.tag()) || s.eq_ignore_ascii_case(e.full_name()) {
                return Ok(e);
            }
        }
        bail!("unknown experiment {s:?}; expected one of E1..E5")
    }
}

/// Training lengths and step sizes, without a seed: stage seeds are derived
/// from the run seed so that one config covers every seed in `seeds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub n_samples: usize,
    /// Fraction of the pre-training mix carrying the answer-verdict
    /// template; the remainder is captioning. Zero disables the template
    /// entirely (and with it, verdict-based scoring).
    pub selfval_fraction: f64,
    pub hyper: HyperConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub n_samples: usize,
    /// Corruption ratio of the fine-tuning corpus (experiments with their
    /// own grids override this per run).
    pub cr: f64,
    pub targeting: Targeting,
    pub group_mix: BTreeMap<Group, f64>,
    pub hyper: HyperConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Benchmark items per format group (VQA, MCVQA, CONV).
    pub per_group: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    /// Which score ranks samples when a pipeline selects a clean subset.
    pub score: ScoreKind,
    /// Fraction of the corpus kept (cleanest first).
    pub keep_fraction: f64,
}

/// Online-selection training methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LnlMethod {
    Mentornet,
    Coteaching,
    Jocor,
}

impl LnlMethod {
    pub fn tag(self) -> &'static str {
        match self {
            LnlMethod::Mentornet => "mentornet",
            LnlMethod::Coteaching => "coteaching",
            LnlMethod::Jocor => "jocor",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LnlConfig {
    /// Method run by the standalone `lnl-train` stage (experiments run all
    /// methods in their grid regardless).
    pub method: LnlMethod,
    /// Final drop rate. Unset means "use the corpus corruption ratio".
    pub alpha: Option<f64>,
    /// Fraction of total steps over which the keep ratio ramps down.
    pub warmup_fraction: f64,
    /// Consistency weight of the co-regularization criterion.
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FurtherConfig {
    /// Further fine-tuning runs for this fraction of the SFT steps.
    pub steps_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// (p, q) percent pairs: clean-set percent p, corrupted-set percent q.
    pub grid: Vec<(f64, f64)>,
    /// Importance probes use at most this many samples per side.
    pub probe_samples: usize,
}

/// Recovery strategies compared by the E5 experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Plain cross-entropy fine-tuning on the corrupted corpus.
    Ce,
    /// Generalized cross-entropy.
    Gce,
    /// Partially Huberised cross-entropy.
    PhuberCe,
    /// Small-loss self-selection.
    Mentornet,
    /// Cross-model small-loss selection.
    Coteaching,
    /// Co-regularized joint selection.
    Jocor,
    /// Margin-norm score, keep cleanest, further fine-tune.
    El2nFt,
    /// Gradient-norm score, keep cleanest, further fine-tune.
    GradnormFt,
    /// Predictive-entropy score, keep cleanest, further fine-tune.
    EntropyFt,
    /// Perplexity score, keep cleanest, further fine-tune.
    PplFt,
    /// Verdict-perplexity score, keep cleanest, further fine-tune.
    ValPplFt,
    /// Ground-truth clean subset, further fine-tune (oracle).
    GtFt,
    /// Verdict-perplexity selection, retrain from the pre-trained base.
    ValPplScratch,
}

impl Strategy {
    pub const ALL: [Strategy; 13] = [
        Strategy::Ce,
        Strategy::Gce,
        Strategy::PhuberCe,
        Strategy::Mentornet,
        Strategy::Coteaching,
        Strategy::Jocor,
        Strategy::El2nFt,
        Strategy::GradnormFt,
        Strategy::EntropyFt,
        Strategy::PplFt,
        Strategy::ValPplFt,
        Strategy::GtFt,
        Strategy::ValPplScratch,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Ce => "ce",
            Strategy::Gce => "gce",
            Strategy::PhuberCe => "phuber_ce",
            Strategy::Mentornet => "mentornet",
            Strategy::Coteaching => "coteaching",
            Strategy::Jocor => "jocor",
            Strategy::El2nFt => "el2n_ft",
            Strategy::GradnormFt => "gradnorm_ft",
            Strategy::EntropyFt => "entropy_ft",
            Strategy::PplFt => "ppl_ft",
            Strategy::ValPplFt => "val_ppl_ft",
            Strategy::GtFt => "gt_ft",
            Strategy::ValPplScratch => "val_ppl_scratch",
        }
    }
}

/// Per-experiment grids. These belong to the config so report cardinality
/// is config cardinality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Corruption ratios swept by E1 (each run twice: corrupted, removed).
    pub e1_crs: Vec<f64>,
    /// Targeted corruption modes compared by E2 (a clean run is always
    /// added as reference).
    pub e2_targetings: Vec<Targeting>,
    /// Training corruption ratios for the E4 detection grid.
    pub e4_crs: Vec<f64>,
    /// Corruption ratio of the corpus the E4 detectors are scored on.
    pub e4_eval_cr: f64,
    /// Strategies compared by E5.
    pub e5_strategies: Vec<Strategy>,
    /// Exponent of the generalized cross-entropy strategy.
    pub e5_gce_q: f64,
    /// Threshold of the partially Huberised cross-entropy strategy.
    pub e5_phuber_tau: f64,
}

/// Everything a run needs. `(config, seed)` determines every artifact byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    /// Objective of plain fine-tuning stages (E5 strategy runs override it).
    pub objective: Objective,
    pub pretrain: PretrainConfig,
    pub sft: SftConfig,
    pub bench: BenchConfig,
    /// Scores computed by the standalone `score` stage.
    pub score_kinds: Vec<ScoreKind>,
    pub selection: SelectionConfig,
    pub lnl: LnlConfig,
    pub further: FurtherConfig,
    pub prune: PruneConfig,
    pub grids: GridConfig,
}

impl ExperimentConfig {
    /// The desk-scale default configuration for an experiment.
    pub fn default_for(experiment: Experiment) -> ExperimentConfig {
        let sft_cr = match experiment {
            Experiment::E1Sweep => 0.6, // the top of the e1_crs grid
            Experiment::E2Targeted => 0.6,
            Experiment::E3Prune => 0.6,
            Experiment::E4Detect => 0.5,
            Experiment::E5Recover => 0.5,
        };
        ExperimentConfig {
            experiment,
            seeds: vec![1, 2, 3],
            out_dir: PathBuf::from(format!("runs/{}", experiment.tag().to_ascii_lowercase())),
            model: ModelConfig {
                vocab_size: vocab().size(),
                d_model: 32,
                n_layers: 2,
                n_heads: 4,
                max_seq: 48,
            },
            objective: Objective::Ce,
            pretrain: PretrainConfig {
                n_samples: 2000,
                selfval_fraction: 0.1,
                hyper: HyperConfig { lr: 1e-3, batch_size: 32, steps: 800 },
            },
            sft: SftConfig {
                n_samples: 8000,
                cr: sft_cr,
                targeting: Targeting::Uniform,
                group_mix: [(Group::Vqa, 0.4), (Group::Mcvqa, 0.3), (Group::Conv, 0.3)]
                    .into_iter()
                    .collect(),
                hyper: HyperConfig { lr: 1e-3, batch_size: 32, steps: 1200 },
            },
            bench: BenchConfig { per_group: 512 },
            score_kinds: vec![
                ScoreKind::Ppl,
                ScoreKind::ValPpl,
                ScoreKind::El2n,
                ScoreKind::GradNorm,
                ScoreKind::Entropy,
            ],
            selection: SelectionConfig { score: ScoreKind::ValPpl, keep_fraction: 0.3 },
            lnl: LnlConfig {
                method: LnlMethod::Jocor,
                alpha: None,
                warmup_fraction: 0.1,
                lambda: 0.85,
            },
            further: FurtherConfig { steps_fraction: 0.5 },
            prune: PruneConfig {
                grid: vec![(10.0, 8.0), (17.0, 15.0), (22.0, 20.0)],
                probe_samples: 1000,
            },
            grids: GridConfig {
                e1_crs: vec![0.0, 0.2, 0.4, 0.6],
                e2_targetings: vec![
                    Targeting::Uniform,
                    Targeting::NoVqa,
                    Targeting::NoMcvqa,
                    Targeting::NoConv,
                ],
                e4_crs: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
                e4_eval_cr: 0.5,
                e5_strategies: Strategy::ALL.to_vec(),
                e5_gce_q: 0.7,
                e5_phuber_tau: 10.0,
            },
        }
    }

    /// Canonical text form (the file format of `--config`).
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing config")
    }

    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml_str(&text)
    }

    /// Fingerprint of the canonical text form; reports carry it as the
    /// provenance key.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(fingerprint(self.to_toml_string()?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("config needs at least one seed");
        }
        for &s in &self.seeds {
            if s & BENCH_SEED_BIT != 0 {
                bail!("seed {s:#x} sets the benchmark seed bit; run seeds must not");
            }
        }
        if self.model.vocab_size < vocab().size() {
            bail!(
                "model vocab_size {} cannot cover the {}-token vocabulary",
                self.model.vocab_size,
                vocab().size()
            );
        }
        let frac01 = |v: f64, name: &str| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                bail!("{name} = {v} is outside [0, 1]");
            }
            Ok(())
        };
        frac01(self.pretrain.selfval_fraction, "pretrain.selfval_fraction")?;
        frac01(self.sft.cr, "sft.cr")?;
        frac01(self.lnl.warmup_fraction, "lnl.warmup_fraction")?;
        frac01(self.lnl.lambda, "lnl.lambda")?;
        if let Some(a) = self.lnl.alpha {
            frac01(a, "lnl.alpha")?;
        }
        if !(self.selection.keep_fraction > 0.0 && self.selection.keep_fraction <= 1.0) {
            bail!("selection.keep_fraction must lie in (0, 1]");
        }
        if !(self.further.steps_fraction > 0.0 && self.further.steps_fraction <= 1.0) {
            bail!("further.steps_fraction must lie in (0, 1]");
        }
        for hyper in [&self.pretrain.hyper, &self.sft.hyper] {
            if !(hyper.lr > 0.0 && hyper.lr.is_finite()) || hyper.batch_size == 0
                || hyper.steps == 0
            {
                bail!("hyper-parameters must be positive (lr {}, batch {}, steps {})",
                    hyper.lr, hyper.batch_size, hyper.steps);
            }
        }
        if self.pretrain.n_samples == 0 || self.sft.n_samples == 0 || self.bench.per_group == 0 {
            bail!("corpus sizes must be positive");
        }
        if self.prune.probe_samples == 0 {
            bail!("prune.probe_samples must be positive");
        }
        for &(p, q) in &self.prune.grid {
            for (v, name) in [(p, "p"), (q, "q")] {
                if !(v > 0.0 && v <= 100.0) {
                    bail!("prune grid {name} = {v} is outside (0, 100]");
                }
            }
        }
        for &cr in self.grids.e1_crs.iter().chain(&self.grids.e4_crs) {
            frac01(cr, "grid cr")?;
        }
        frac01(self.grids.e4_eval_cr, "grids.e4_eval_cr")?;
        frac01(self.grids.e5_gce_q, "grids.e5_gce_q")?;
        if self.grids.e5_gce_q == 0.0 {
            bail!("grids.e5_gce_q must be positive");
        }
        if self.grids.e5_phuber_tau <= 1.0 {
            bail!("grids.e5_phuber_tau must exceed 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_for_every_experiment() {
        for e in Experiment::ALL {
            let cfg = ExperimentConfig::default_for(e);
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn toml_roundtrip_is_lossless() {
        for e in Experiment::ALL {
            let cfg = ExperimentConfig::default_for(e);
            let text = cfg.to_toml_string().unwrap();
            let back = ExperimentConfig::from_toml_str(&text).unwrap();
            assert_eq!(back, cfg, "lossless roundtrip for {e}");
            // And the canonical form is a fixed point.
            assert_eq!(back.to_toml_string().unwrap(), text);
        }
    }

    #[test]
    fn roundtrip_survives_non_default_values() {
        let mut cfg = ExperimentConfig::default_for(Experiment::E5Recover);
        cfg.objective = Objective::Gce { q: 0.5 };
        cfg.sft.targeting = Targeting::NoConv;
        cfg.lnl.alpha = Some(0.35);
        cfg.seeds = vec![7, 11];
        cfg.prune.grid = vec![(12.0, 9.5)];
        cfg.grids.e5_strategies = vec![Strategy::Ce, Strategy::ValPplScratch];
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ExperimentConfig::default_for(Experiment::E1Sweep);
        let mut b = a.clone();
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        b.seeds = vec![9];
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    }

    #[test]
    fn experiment_names_parse_in_both_forms() {
        assert_eq!("E3".parse::<Experiment>().unwrap(), Experiment::E3Prune);
        assert_eq!("e5".parse::<Experiment>().unwrap(), Experiment::E5Recover);
        assert_eq!("E1_sweep".parse::<Experiment>().unwrap(), Experiment::E1Sweep);
        assert!("E9".parse::<Experiment>().is_err());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let base = ExperimentConfig::default_for(Experiment::E1Sweep);

        let mut c = base.clone();
        c.seeds.clear();
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.seeds = vec![BENCH_SEED_BIT | 3];
        assert!(c.validate().is_err(), "benchmark seed bit is reserved");

        let mut c = base.clone();
        c.sft.cr = 1.5;
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.model.vocab_size = 10;
        assert!(c.validate().is_err(), "model must cover the vocabulary");

        let mut c = base.clone();
        c.selection.keep_fraction = 0.0;
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.prune.grid = vec![(0.0, 5.0)];
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.grids.e5_phuber_tau = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let cfg = ExperimentConfig::default_for(Experiment::E1Sweep);
        let mut text = cfg.to_toml_string().unwrap();
        text.push_str("\nmystery_knob = 3\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }
}
