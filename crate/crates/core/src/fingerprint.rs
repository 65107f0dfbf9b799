//! Fingerprint pairs: a trigger `x` of `n` under-trained tokens and a target
//! `y` of `m` under-trained tokens, drawn from a detection report.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::DetectionReport;
use crate::tensorio::{TensorIoError, TokenId};

pub const DEFAULT_N_RANGE: (usize, usize) = (11, 15);
pub const DEFAULT_M: usize = 5;
pub const DEFAULT_COPIES: usize = 10;
const RECORD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FingerprintError {
    #[error("report flags {flagged} tokens but {needed} are required")]
    InsufficientFlaggedTokens { flagged: usize, needed: usize },
    #[error("invalid pair shape: {0}")]
    InvalidShape(String),
    #[error("copies must be at least 1")]
    ZeroCopies,
    #[error("malformed fingerprint record: {0}")]
    MalformedRecord(String),
    #[error("pair was built from report {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

/// Trigger length range (inclusive) and target length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairShape {
    pub n_range: (usize, usize),
    pub m: usize,
}

impl Default for PairShape {
    fn default() -> Self {
        Self {
            n_range: DEFAULT_N_RANGE,
            m: DEFAULT_M,
        }
    }
}

impl PairShape {
    fn validate(&self) -> Result<(), FingerprintError> {
        let (lo, hi) = self.n_range;
        if lo == 0 || lo > hi || self.m == 0 {
            return Err(FingerprintError::InvalidShape(format!(
                "n_range [{lo}, {hi}] and m {} must be non-empty",
                self.m
            )));
        }
        Ok(())
    }

    /// Smallest flagged set every draw can be taken from.
    pub fn required_pool(&self) -> usize {
        self.n_range.1 + self.m
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FingerprintPair {
    pub trigger: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub seed: u64,
    pub report_digest: String,
}

#[derive(Serialize, Deserialize)]
struct Record {
    version: u32,
    seed: u64,
    trigger: Vec<TokenId>,
    target: Vec<TokenId>,
    report_digest: String,
}

fn draw(pool: &[TokenId], k: usize, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let mut pool = pool.to_vec();
    pool.partial_shuffle(rng, k).0.to_vec()
}

/// Samples a pair from `report.flagged` with a ChaCha8 stream seeded by `seed`.
///
/// Draw order: `n` uniform on `n_range`, then the trigger, then the target.
/// Each sequence is sampled without replacement; trigger and target may share
/// tokens.
pub fn make_pair(
    report: &DetectionReport,
    seed: u64,
    shape: &PairShape,
) -> Result<FingerprintPair, FingerprintError> {
    shape.validate()?;
    let needed = shape.required_pool();
    if report.flagged.len() < needed {
        return Err(FingerprintError::InsufficientFlaggedTokens {
            flagged: report.flagged.len(),
            needed,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(shape.n_range.0..=shape.n_range.1);
    let trigger = draw(&report.flagged, n, &mut rng);
    let target = draw(&report.flagged, shape.m, &mut rng);
    Ok(FingerprintPair {
        trigger,
        target,
        seed,
        report_digest: report.digest(),
    })
}

/// One fine-tuning row: (prompt, completion).
pub type SftRow = (Vec<TokenId>, Vec<TokenId>);

/// `copies` identical (trigger, target) rows for fingerprint SFT.
pub fn build_sft_rows(
    pair: &FingerprintPair,
    copies: usize,
) -> Result<Vec<SftRow>, FingerprintError> {
    if copies == 0 {
        return Err(FingerprintError::ZeroCopies);
    }
    Ok(vec![(pair.trigger.clone(), pair.target.clone()); copies])
}

fn has_duplicates(ids: &[TokenId]) -> bool {
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.windows(2).any(|w| w[0] == w[1])
}

impl FingerprintPair {
    /// Checks lengths against `shape` and, when given, provenance and
    /// membership against `report`.
    pub fn validate(
        &self,
        shape: &PairShape,
        report: Option<&DetectionReport>,
    ) -> Result<(), FingerprintError> {
        shape.validate()?;
        let malformed = |m: String| Err(FingerprintError::MalformedRecord(m));
        let (lo, hi) = shape.n_range;
        if !(lo..=hi).contains(&self.trigger.len()) {
            return malformed(format!(
                "trigger length {} outside [{lo}, {hi}]",
                self.trigger.len()
            ));
        }
        if self.target.len() != shape.m {
            return malformed(format!(
                "target length {} but m = {}",
                self.target.len(),
                shape.m
            ));
        }
        if let Some(report) = report {
            let expected = report.digest();
            if expected != self.report_digest {
                return Err(FingerprintError::DigestMismatch {
                    expected,
                    found: self.report_digest.clone(),
                });
            }
            if let Some(id) = self
                .trigger
                .iter()
                .chain(&self.target)
                .find(|&&id| !report.is_flagged(id))
            {
                return malformed(format!("token {} is not flagged by the report", id.0));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&Record {
            version: RECORD_VERSION,
            seed: self.seed,
            trigger: self.trigger.clone(),
            target: self.target.clone(),
            report_digest: self.report_digest.clone(),
        })
        .expect("record serializes")
    }

    /// Parses a record, rejecting unknown versions, empty sequences and
    /// repeated ids within a sequence.
    pub fn from_json(text: &str) -> Result<Self, FingerprintError> {
        let record: Record = serde_json::from_str(text)
            .map_err(|e| FingerprintError::MalformedRecord(e.to_string()))?;
        let malformed = |m: &str| Err(FingerprintError::MalformedRecord(m.to_string()));
        if record.version != RECORD_VERSION {
            return malformed("unsupported record version");
        }
        if record.trigger.is_empty() || record.target.is_empty() {
            return malformed("trigger and target must be non-empty");
        }
        if has_duplicates(&record.trigger) || has_duplicates(&record.target) {
            return malformed("repeated token within a sequence");
        }
        if record.report_digest.len() != 64 || hex::decode(&record.report_digest).is_err() {
            return malformed("report_digest must be 64 hex characters");
        }
        Ok(Self {
            trigger: record.trigger,
            target: record.target,
            seed: record.seed,
            report_digest: record.report_digest,
        })
    }
}

pub fn save_pair(pair: &FingerprintPair, path: impl AsRef<Path>) -> Result<(), FingerprintError> {
    let path = path.as_ref();
    fs::write(path, pair.to_json() + "\n").map_err(|source| {
        TensorIoError::IoFailure {
            path: path.display().to_string(),
            source,
        }
        .into()
    })
}

pub fn load_pair(path: impl AsRef<Path>) -> Result<FingerprintPair, FingerprintError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| TensorIoError::IoFailure {
        path: path.display().to_string(),
        source,
    })?;
    FingerprintPair::from_json(&text)
}

/// [`load_pair`] followed by [`FingerprintPair::validate`].
pub fn load_pair_checked(
    path: impl AsRef<Path>,
    shape: &PairShape,
    report: Option<&DetectionReport>,
) -> Result<FingerprintPair, FingerprintError> {
    let pair = load_pair(path)?;
    pair.validate(shape, report)?;
    Ok(pair)
}
