//! The whole pipeline in one call: pretrain, detect, fingerprint, embed,
//! verify and evaluate, every random choice derived from one master seed.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    corpus_digest, evaluate, DetectionSummary, EvalError, EvalSettings, MetricReport,
    PretrainSummary, Schedule, SftSummary, SweepPoint, RELIABILITY_LEN_RANGE, RELIABILITY_TRIALS,
};
use crate::detector::{detect, threshold, DetectionReport};
use crate::fingerprint::{build_sft_rows, make_pair, FingerprintPair, PairShape, DEFAULT_COPIES};
use crate::tensorio::{TokenId, UnembeddingMatrix};
use crate::toylm::corpus::{MarkovCorpusSpec, MarkovSource};
use crate::toylm::{
    pretrain, sft_embed, SamplingConfig, SftOptions, ToyLM, ToyLMConfig, TrainOptions, TrainStats,
};

/// Percentiles tried when choosing a detection threshold: 0.02 to 0.15.
pub const SWEEP_PERCENTILES: [f64; 14] = [
    0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.10, 0.11, 0.12, 0.13, 0.14, 0.15,
];

/// First eight bytes (LE) of SHA-256 over a fixed tag, `master` (LE) and
/// `label`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"tokenprint-seed\0");
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Smallest candidate percentile whose threshold flags at least
/// `min_flagged` tokens.
pub fn select_percentile(distances: &[f64], candidates: &[f64], min_flagged: usize) -> Option<f64> {
    candidates
        .iter()
        .copied()
        .find(|&p| threshold(distances, p).1.len() >= min_flagged)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamDomain {
    pub name: String,
    pub sequences: usize,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub seed: u64,
    pub model: ToyLMConfig,
    pub pretrain_sequences: usize,
    pub heldout_sequences: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub train: TrainOptions,
    /// The lowest `unused_count` reserved ids are handed to the detector.
    pub unused_count: usize,
    /// `None` picks the smallest of [`SWEEP_PERCENTILES`] that flags enough
    /// tokens for the pair shape.
    pub percentile: Option<f64>,
    pub shape: PairShape,
    pub copies: usize,
    pub sft: SftOptions,
    pub downstream: Vec<DownstreamDomain>,
    pub reliability_trials: usize,
    pub sampling: SamplingConfig,
    pub sampling_seeds: Vec<u64>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: ToyLMConfig::default(),
            pretrain_sequences: 2000,
            heldout_sequences: 200,
            pretrain_epochs: 3,
            pretrain_lr: 3e-3,
            train: TrainOptions::default(),
            unused_count: 3,
            percentile: None,
            shape: PairShape::default(),
            copies: DEFAULT_COPIES,
            sft: SftOptions::default(),
            downstream: vec![
                DownstreamDomain {
                    name: "domain-a-3ep".into(),
                    sequences: 1000,
                    epochs: 3,
                    lr: 2e-5,
                },
                DownstreamDomain {
                    name: "domain-b-1ep".into(),
                    sequences: 1000,
                    epochs: 1,
                    lr: 2e-5,
                },
            ],
            reliability_trials: RELIABILITY_TRIALS,
            sampling: SamplingConfig::default(),
            sampling_seeds: (0..20).collect(),
        }
    }
}

/// Every intermediate product of [`run_demo`].
#[derive(Debug, Clone)]
pub struct DemoArtifacts {
    pub config: DemoConfig,
    pub corpus: Vec<Vec<TokenId>>,
    pub heldout: Vec<Vec<TokenId>>,
    pub downstream: Vec<Schedule>,
    pub base: ToyLM,
    pub pretrain_stats: TrainStats,
    pub unembedding: UnembeddingMatrix,
    pub report: DetectionReport,
    pub pair: FingerprintPair,
    pub fingerprinted: ToyLM,
    pub sft_stats: TrainStats,
    pub metrics: MetricReport,
}

/// Pretraining, held-out and downstream corpora for a demo config.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpora {
    pub corpus: Vec<Vec<TokenId>>,
    pub heldout: Vec<Vec<TokenId>>,
    pub downstream: Vec<Schedule>,
}

fn check_config(config: &DemoConfig) -> Result<(), EvalError> {
    config.model.validate()?;
    if config.unused_count == 0 || config.unused_count > config.model.reserved_count {
        return Err(EvalError::InvalidArgument(format!(
            "unused_count {} must be in 1..={}",
            config.unused_count, config.model.reserved_count
        )));
    }
    Ok(())
}

/// Markov corpora over the non-reserved ids. Held-out and downstream
/// sequences never repeat a pretraining sequence; each downstream schedule
/// gets its own transition table.
pub fn generate_corpora(config: &DemoConfig) -> Result<Corpora, EvalError> {
    check_config(config)?;
    let seed = |label: &str| derive_seed(config.seed, label);
    let alphabet = config.model.first_reserved();
    let source = MarkovSource::new(MarkovCorpusSpec::new(alphabet, seed("pretrain-domain")));
    let corpus = source.generate(config.pretrain_sequences, seed("pretrain-draw"));
    let heldout = source.generate_disjoint(config.heldout_sequences, seed("heldout-draw"), &corpus);
    let downstream = config
        .downstream
        .iter()
        .map(|d| {
            let domain = MarkovSource::new(MarkovCorpusSpec::new(
                alphabet,
                seed(&format!("downstream-domain:{}", d.name)),
            ));
            Schedule {
                name: d.name.clone(),
                corpus: domain.generate_disjoint(
                    d.sequences,
                    seed(&format!("downstream-draw:{}", d.name)),
                    &corpus,
                ),
                epochs: d.epochs,
                lr: d.lr,
            }
        })
        .collect();
    Ok(Corpora {
        corpus,
        heldout,
        downstream,
    })
}

/// A freshly initialised model trained on `corpus` with the demo settings.
pub fn pretrain_base(
    config: &DemoConfig,
    corpus: &[Vec<TokenId>],
) -> Result<(ToyLM, TrainStats), EvalError> {
    check_config(config)?;
    log::info!("pretraining on {} sequences", corpus.len());
    let mut base = ToyLM::new(config.model.clone(), derive_seed(config.seed, "model-init"))?;
    let stats = pretrain(
        &mut base,
        corpus,
        config.pretrain_epochs,
        config.pretrain_lr,
        &pretrain_options(config),
    )?;
    Ok((base, stats))
}

fn pretrain_options(config: &DemoConfig) -> TrainOptions {
    TrainOptions {
        shuffle_seed: derive_seed(config.seed, "pretrain-shuffle"),
        ..config.train
    }
}

pub fn run_demo(config: &DemoConfig) -> Result<DemoArtifacts, EvalError> {
    let seed = |label: &str| derive_seed(config.seed, label);
    let model_cfg = &config.model;
    let Corpora {
        corpus,
        heldout,
        downstream,
    } = generate_corpora(config)?;
    let (base, pretrain_stats) = pretrain_base(config, &corpus)?;
    let train = pretrain_options(config);

    let unembedding = base.export_unembedding();
    let reserved = model_cfg.reserved_ids();
    let unused: BTreeSet<TokenId> = reserved[..config.unused_count].iter().copied().collect();
    let probe = detect(&unembedding, &unused, SWEEP_PERCENTILES[0])?;
    let percentile = match config.percentile {
        Some(p) => p,
        None => select_percentile(
            &probe.distances,
            &SWEEP_PERCENTILES,
            config.shape.required_pool(),
        )
        .unwrap_or(SWEEP_PERCENTILES[SWEEP_PERCENTILES.len() - 1]),
    };
    let report = detect(&unembedding, &unused, percentile)?;
    let sweep: Vec<SweepPoint> = SWEEP_PERCENTILES
        .iter()
        .map(|&p| {
            let flagged = threshold(&report.distances, p).1;
            SweepPoint {
                percentile: p,
                flagged: flagged.len(),
                reserved_flagged: flagged
                    .iter()
                    .filter(|&&t| model_cfg.is_reserved(t))
                    .count(),
            }
        })
        .collect();
    let reserved_flagged = report
        .flagged
        .iter()
        .filter(|&&t| model_cfg.is_reserved(t))
        .count();
    log::info!(
        "percentile {percentile}: {} flagged, {reserved_flagged}/{} reserved",
        report.flagged.len(),
        reserved.len()
    );

    let pair = make_pair(&report, seed("pair"), &config.shape)?;
    let rows = build_sft_rows(&pair, config.copies)?;
    let mut fingerprinted = base.clone();
    let sft = SftOptions {
        train: TrainOptions {
            shuffle_seed: seed("sft-shuffle"),
            ..config.sft.train
        },
        ..config.sft
    };
    let started = Instant::now();
    let sft_stats = sft_embed(&mut fingerprinted, &rows, &sft)?;
    let efficiency_seconds = started.elapsed().as_secs_f64();

    let settings = EvalSettings {
        reliability_trials: config.reliability_trials,
        reliability_len_range: RELIABILITY_LEN_RANGE,
        reliability_seed: seed("reliability"),
        sampling: config.sampling,
        sampling_seeds: config.sampling_seeds.clone(),
        finetune: TrainOptions {
            shuffle_seed: seed("finetune-shuffle"),
            ..config.train
        },
    };
    let mut metrics = evaluate(
        &base,
        &fingerprinted,
        &pair,
        &heldout,
        &downstream,
        efficiency_seconds,
        &settings,
    )?;

    let p = &mut metrics.provenance;
    p.master_seed = Some(config.seed);
    let labels = [
        "pretrain-domain",
        "pretrain-draw",
        "heldout-draw",
        "model-init",
        "pretrain-shuffle",
        "pair",
        "sft-shuffle",
        "reliability",
        "finetune-shuffle",
    ];
    p.seeds = labels
        .iter()
        .map(|l| (l.to_string(), seed(l)))
        .collect::<BTreeMap<_, _>>();
    p.sft = Some(SftSummary {
        options: sft,
        copies: config.copies,
        lr_used: sft_stats.lr,
        attempts: sft_stats.attempts,
        steps: sft_stats.steps,
        final_loss: sft_stats.final_loss,
    });
    p.pretrain = Some(PretrainSummary {
        sequences: corpus.len(),
        epochs: config.pretrain_epochs,
        lr: config.pretrain_lr,
        options: train,
        corpus_digest: corpus_digest(&corpus),
        final_loss: pretrain_stats.epochs.last().map(|e| e.loss),
    });
    p.detection = Some(DetectionSummary {
        unused_ids: unused.iter().copied().collect(),
        percentile,
        flagged: report.flagged.len(),
        reserved_flagged,
        reserved_total: reserved.len(),
        report_digest: report.digest(),
        sweep,
    });

    Ok(DemoArtifacts {
        config: config.clone(),
        corpus,
        heldout,
        downstream,
        base,
        pretrain_stats,
        unembedding,
        report,
        pair,
        fingerprinted,
        sft_stats,
        metrics,
    })
}
