//! The five fingerprint quality metrics at toy scale: effectiveness,
//! reliability, efficiency, harmlessness and persistence.

mod pipeline;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detector::DetectError;
use crate::fingerprint::{FingerprintError, FingerprintPair};
use crate::tensorio::{TensorIoError, TokenId};
use crate::toylm::{
    finetune, greedy_decode, perplexity, LmError, SamplingConfig, SftOptions, ToyLM, ToyLMConfig,
    TrainOptions,
};
use crate::verifier::{is_match, verify_local, DecodeMode, VerifyError};

pub use pipeline::{
    derive_seed, generate_corpora, pretrain_base, run_demo, select_percentile, Corpora,
    DemoArtifacts, DemoConfig, DownstreamDomain, SWEEP_PERCENTILES,
};

/// Largest acceptable relative perplexity increase after fingerprint SFT.
pub const HARMLESSNESS_TOLERANCE: f64 = 0.05;
pub const RELIABILITY_TRIALS: usize = 500;
pub const RELIABILITY_LEN_RANGE: (usize, usize) = (11, 15);

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation argument: {0}")]
    InvalidArgument(String),
    #[error("every reliability trial failed")]
    NoSuccessfulTrials,
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Model(#[from] LmError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

/// A model answering a prompt with `m` tokens, as seen by the reliability
/// estimator.
pub trait Probe: Sync {
    fn vocab_size(&self) -> usize;
    fn respond(&self, prompt: &[TokenId], m: usize) -> Result<Vec<TokenId>, VerifyError>;
}

impl Probe for ToyLM {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn respond(&self, prompt: &[TokenId], m: usize) -> Result<Vec<TokenId>, VerifyError> {
        Ok(greedy_decode(self, prompt, m)?)
    }
}

/// 100 if the model emits the target for the trigger, else 0.
pub fn measure_effectiveness(
    model: &ToyLM,
    pair: &FingerprintPair,
    mode: &DecodeMode,
) -> Result<f64, EvalError> {
    Ok(if verify_local(model, pair, mode)?.matched {
        100.0
    } else {
        0.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledEffectiveness {
    pub config: SamplingConfig,
    pub seeds: Vec<u64>,
    pub matched: usize,
    /// Percentage of seeds whose sampled output matched.
    pub fsr: f64,
}

pub fn measure_sampled_effectiveness(
    model: &ToyLM,
    pair: &FingerprintPair,
    config: &SamplingConfig,
    seeds: &[u64],
) -> Result<SampledEffectiveness, EvalError> {
    if seeds.is_empty() {
        return Err(EvalError::InvalidArgument("no sampling seeds".into()));
    }
    let mut matched = 0;
    for &seed in seeds {
        let mode = DecodeMode::Sampled {
            config: *config,
            seed,
        };
        if verify_local(model, pair, &mode)?.matched {
            matched += 1;
        }
    }
    Ok(SampledEffectiveness {
        config: *config,
        seeds: seeds.to_vec(),
        matched,
        fsr: 100.0 * matched as f64 / seeds.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    pub pct: f64,
    pub trials: usize,
    pub len_range: (usize, usize),
    pub seed: u64,
    /// Trials whose output was not the target.
    pub non_matching: usize,
    /// Trials that failed to produce an output; excluded from `pct`.
    pub errors: usize,
    /// Random probes equal to the trigger, redrawn before use.
    pub trigger_redraws: usize,
}

/// Random probes for the reliability metric.
///
/// Trial `i` uses its own ChaCha8 stream: seeded with `seed`, stream `i`.
/// Length is uniform on `len_range`, tokens uniform over `0..vocab_size`. A
/// probe equal to `exclude` is redrawn from the same stream. Returns the
/// probes and the number of redraws.
pub fn reliability_probes(
    vocab_size: usize,
    trials: usize,
    len_range: (usize, usize),
    seed: u64,
    exclude: &[TokenId],
) -> (Vec<Vec<TokenId>>, usize) {
    let mut redraws = 0;
    let probes = (0..trials)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            loop {
                let len = rng.random_range(len_range.0..=len_range.1);
                let probe: Vec<TokenId> = (0..len)
                    .map(|_| TokenId(rng.random_range(0..vocab_size as u32)))
                    .collect();
                if probe != exclude {
                    break probe;
                }
                redraws += 1;
            }
        })
        .collect();
    (probes, redraws)
}

/// Percentage of random probes for which the model does not emit the target.
pub fn measure_reliability(
    model: &dyn Probe,
    pair: &FingerprintPair,
    trials: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<Reliability, EvalError> {
    if trials == 0 {
        return Err(EvalError::InvalidArgument(
            "trials must be at least 1".into(),
        ));
    }
    if len_range.0 == 0 || len_range.0 > len_range.1 {
        return Err(EvalError::InvalidArgument(format!(
            "length range {len_range:?}"
        )));
    }
    let (probes, trigger_redraws) =
        reliability_probes(model.vocab_size(), trials, len_range, seed, &pair.trigger);
    debug_assert!(probes.iter().all(|p| *p != pair.trigger));
    let m = pair.target.len();
    let outcomes = parallel_map(&probes, |probe| {
        model
            .respond(probe, m)
            .map(|out| is_match(&out, &pair.target))
    });
    let errors = outcomes.iter().filter(|o| o.is_err()).count();
    let non_matching = outcomes.iter().filter(|o| matches!(o, Ok(false))).count();
    if errors == trials {
        return Err(EvalError::NoSuccessfulTrials);
    }
    Ok(Reliability {
        pct: 100.0 * non_matching as f64 / (trials - errors) as f64,
        trials,
        len_range,
        seed,
        non_matching,
        errors,
        trigger_redraws,
    })
}

/// Order-preserving map over worker threads.
fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    if workers <= 1 || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Harmlessness {
    pub ppl_before: f64,
    pub ppl_after: f64,
    pub relative_delta: f64,
    /// `relative_delta <= HARMLESSNESS_TOLERANCE`.
    pub within_tolerance: bool,
}

pub fn measure_harmlessness(
    before: &ToyLM,
    after: &ToyLM,
    heldout: &[Vec<TokenId>],
) -> Result<Harmlessness, EvalError> {
    let ppl_before = perplexity(before, heldout)?;
    let ppl_after = perplexity(after, heldout)?;
    let relative_delta = (ppl_after - ppl_before) / ppl_before;
    Ok(Harmlessness {
        ppl_before,
        ppl_after,
        relative_delta,
        within_tolerance: relative_delta <= HARMLESSNESS_TOLERANCE,
    })
}

/// One downstream fine-tuning run used to attack the fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub name: String,
    pub corpus: Vec<Vec<TokenId>>,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInfo {
    pub name: String,
    pub epochs: usize,
    pub lr: f64,
    pub sequences: usize,
    pub corpus_digest: String,
    pub final_loss: Option<f64>,
}

/// Fine-tunes a clone of `model` per schedule and re-measures greedy
/// effectiveness. Returns name → FSR plus what was run.
pub fn measure_persistence(
    model: &ToyLM,
    pair: &FingerprintPair,
    schedules: &[Schedule],
    opts: &TrainOptions,
) -> Result<(BTreeMap<String, f64>, Vec<ScheduleInfo>), EvalError> {
    if schedules.is_empty() {
        return Err(EvalError::InvalidArgument(
            "no persistence schedules".into(),
        ));
    }
    let mut fsr = BTreeMap::new();
    let mut infos = Vec::new();
    for s in schedules {
        let mut tuned = model.clone();
        let stats = finetune(&mut tuned, &s.corpus, s.epochs, s.lr, opts)?;
        let value = measure_effectiveness(&tuned, pair, &DecodeMode::Greedy)?;
        log::info!("persistence {}: FSR {value}", s.name);
        fsr.insert(s.name.clone(), value);
        infos.push(ScheduleInfo {
            name: s.name.clone(),
            epochs: s.epochs,
            lr: s.lr,
            sequences: s.corpus.len(),
            corpus_digest: corpus_digest(&s.corpus),
            final_loss: stats.epochs.last().map(|e| e.loss),
        });
    }
    Ok((fsr, infos))
}

/// SHA-256 over the sequences, each prefixed by its length.
pub fn corpus_digest(corpus: &[Vec<TokenId>]) -> String {
    let mut h = Sha256::new();
    for seq in corpus {
        h.update((seq.len() as u64).to_le_bytes());
        for t in seq {
            h.update(t.0.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSummary {
    pub options: SftOptions,
    pub copies: usize,
    pub lr_used: f64,
    pub attempts: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub percentile: f64,
    pub flagged: usize,
    pub reserved_flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub unused_ids: Vec<TokenId>,
    pub percentile: f64,
    pub flagged: usize,
    pub reserved_flagged: usize,
    pub reserved_total: usize,
    pub report_digest: String,
    pub sweep: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub sequences: usize,
    pub epochs: usize,
    pub lr: f64,
    pub options: TrainOptions,
    pub corpus_digest: String,
    pub final_loss: Option<f64>,
}

/// Everything needed to re-run an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: Option<u64>,
    pub seeds: BTreeMap<String, u64>,
    pub model_config: ToyLMConfig,
    pub base_model_digest: String,
    pub fingerprinted_model_digest: String,
    pub pair: FingerprintPair,
    pub heldout_sequences: usize,
    pub heldout_digest: String,
    pub finetune_options: TrainOptions,
    pub schedules: Vec<ScheduleInfo>,
    pub sft: Option<SftSummary>,
    pub pretrain: Option<PretrainSummary>,
    pub detection: Option<DetectionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Greedy decoding; 0 or 100.
    pub effectiveness_fsr: f64,
    pub effectiveness_sampled: SampledEffectiveness,
    pub reliability_pct: f64,
    pub reliability: Reliability,
    /// Wall clock of fingerprint SFT, all escalation attempts included.
    pub efficiency_seconds: f64,
    pub harmlessness: Harmlessness,
    /// Schedule name → FSR after downstream fine-tuning.
    pub persistence: BTreeMap<String, f64>,
    pub provenance: Provenance,
}

/// Settings for [`evaluate`] that are not inputs models or data.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub reliability_trials: usize,
    pub reliability_len_range: (usize, usize),
    pub reliability_seed: u64,
    pub sampling: SamplingConfig,
    pub sampling_seeds: Vec<u64>,
    pub finetune: TrainOptions,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            reliability_trials: RELIABILITY_TRIALS,
            reliability_len_range: RELIABILITY_LEN_RANGE,
            reliability_seed: 0,
            sampling: SamplingConfig::default(),
            sampling_seeds: (0..20).collect(),
            finetune: TrainOptions::default(),
        }
    }
}

/// All five metrics for `fingerprinted` against its pre-SFT `base`.
pub fn evaluate(
    base: &ToyLM,
    fingerprinted: &ToyLM,
    pair: &FingerprintPair,
    heldout: &[Vec<TokenId>],
    schedules: &[Schedule],
    efficiency_seconds: f64,
    settings: &EvalSettings,
) -> Result<MetricReport, EvalError> {
    if base.config() != fingerprinted.config() {
        return Err(EvalError::InvalidArgument(
            "base and fingerprinted configs differ".into(),
        ));
    }
    let effectiveness_fsr = measure_effectiveness(fingerprinted, pair, &DecodeMode::Greedy)?;
    let effectiveness_sampled = measure_sampled_effectiveness(
        fingerprinted,
        pair,
        &settings.sampling,
        &settings.sampling_seeds,
    )?;
    let reliability = measure_reliability(
        fingerprinted,
        pair,
        settings.reliability_trials,
        settings.reliability_len_range,
        settings.reliability_seed,
    )?;
    let harmlessness = measure_harmlessness(base, fingerprinted, heldout)?;
    let (persistence, schedule_infos) =
        measure_persistence(fingerprinted, pair, schedules, &settings.finetune)?;
    let mut seeds = BTreeMap::new();
    seeds.insert("reliability".to_string(), settings.reliability_seed);
    seeds.insert("pair".to_string(), pair.seed);
    seeds.insert("model_init".to_string(), base.seed());
    Ok(MetricReport {
        effectiveness_fsr,
        effectiveness_sampled,
        reliability_pct: reliability.pct,
        reliability,
        efficiency_seconds: efficiency_seconds.max(0.0),
        harmlessness,
        persistence,
        provenance: Provenance {
            master_seed: None,
            seeds,
            model_config: base.config().clone(),
            base_model_digest: base.digest(),
            fingerprinted_model_digest: fingerprinted.digest(),
            pair: pair.clone(),
            heldout_sequences: heldout.len(),
            heldout_digest: corpus_digest(heldout),
            finetune_options: settings.finetune,
            schedules: schedule_infos,
            sft: None,
            pretrain: None,
            detection: None,
        },
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// The report with wall-clock fields zeroed; equal across reruns with the
    /// same seeds.
    pub fn without_timings(&self) -> Self {
        Self {
            efficiency_seconds: 0.0,
            ..self.clone()
        }
    }

    /// SHA-256 of [`without_timings`](Self::without_timings) as JSON.
    pub fn deterministic_digest(&self) -> String {
        hex::encode(Sha256::digest(self.without_timings().to_json().as_bytes()))
    }

    pub fn table(&self) -> String {
        let mut t = String::new();
        let h = &self.harmlessness;
        let s = &self.effectiveness_sampled;
        let r = &self.reliability;
        let _ = writeln!(t, "{:<26} value", "metric");
        let _ = writeln!(
            t,
            "{:<26} {:.0}",
            "effectiveness (greedy)", self.effectiveness_fsr
        );
        let _ = writeln!(
            t,
            "{:<26} {:.0} ({}/{} seeds)",
            "effectiveness (sampled)",
            s.fsr,
            s.matched,
            s.seeds.len()
        );
        let _ = writeln!(
            t,
            "{:<26} {:.2} % ({} trials, {} errors)",
            "reliability", self.reliability_pct, r.trials, r.errors
        );
        let _ = writeln!(t, "{:<26} {:.2} s", "efficiency", self.efficiency_seconds);
        let _ = writeln!(
            t,
            "{:<26} ppl {:.4} -> {:.4} ({:+.2} %){}",
            "harmlessness",
            h.ppl_before,
            h.ppl_after,
            100.0 * h.relative_delta,
            if h.within_tolerance {
                ""
            } else {
                "  EXCEEDS TOLERANCE"
            }
        );
        for (name, fsr) in &self.persistence {
            let _ = writeln!(t, "{:<26} {fsr:.0}", format!("persistence ({name})"));
        }
        t
    }
}
