//! Black-box verification: present the trigger and check whether the first
//! `m` emitted tokens equal the target, against a local model or a remote
//! completions endpoint.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::fingerprint::FingerprintPair;
use crate::tensorio::TokenId;
use crate::toylm::{greedy_decode, sample_decode, LmError, SamplingConfig, ToyLM};

pub const DEFAULT_PATH: &str = "/v1/completions";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const API_KEY_ENV: &str = "TOKENPRINT_API_KEY";
/// Extra tokens requested from a remote endpoint beyond the target length.
pub const REMOTE_SLACK: usize = 8;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("token {id} is outside the model vocabulary of {vocab_size}")]
    VocabMismatch { id: u32, vocab_size: usize },
    #[error("renderer has no text for token {0}")]
    RendererUndefined(u32),
    #[error("rendered fingerprint does not parse back to the same ids")]
    RenderRoundTripFailure,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("response unparsable: {0}")]
    ResponseUnparsable(String),
    #[error(transparent)]
    Model(#[from] LmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sampled { config: SamplingConfig, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transport {
    Local,
    Remote { endpoint: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub matched: bool,
    pub emitted: Vec<TokenId>,
    pub decode_mode: DecodeMode,
    pub transport: Transport,
    pub latency_ms: f64,
}

/// Prefix match: the first `target.len()` emitted ids equal the target.
pub fn is_match(emitted: &[TokenId], target: &[TokenId]) -> bool {
    emitted.len() >= target.len() && emitted[..target.len()] == *target
}

fn check_vocab(model: &ToyLM, pair: &FingerprintPair) -> Result<(), VerifyError> {
    let vocab_size = model.config().vocab_size;
    match pair
        .trigger
        .iter()
        .chain(&pair.target)
        .find(|t| t.index() >= vocab_size)
    {
        Some(t) => Err(VerifyError::VocabMismatch {
            id: t.0,
            vocab_size,
        }),
        None => Ok(()),
    }
}

/// Decodes `m` tokens from the trigger; never mutates the model.
pub fn verify_local(
    model: &ToyLM,
    pair: &FingerprintPair,
    mode: &DecodeMode,
) -> Result<VerificationResult, VerifyError> {
    check_vocab(model, pair)?;
    let start = Instant::now();
    let m = pair.target.len();
    let emitted = match mode {
        DecodeMode::Greedy => greedy_decode(model, &pair.trigger, m)?,
        DecodeMode::Sampled { config, seed } => {
            sample_decode(model, &pair.trigger, m, config, *seed)?
        }
    };
    Ok(VerificationResult {
        matched: is_match(&emitted, &pair.target),
        emitted,
        decode_mode: *mode,
        transport: Transport::Local,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Maps token ids to prompt text and completion text back to ids.
pub trait TokenRenderer: Send + Sync {
    fn render(&self, ids: &[TokenId]) -> Result<String, VerifyError>;

    /// Ids recognised at the start of `text`; parsing stops at the first
    /// piece that is not a token.
    fn parse(&self, text: &str) -> Vec<TokenId>;
}

/// Ids as space-separated decimals.
#[derive(Debug, Clone, Copy, Default)]
pub struct DecimalRenderer;

impl TokenRenderer for DecimalRenderer {
    fn render(&self, ids: &[TokenId]) -> Result<String, VerifyError> {
        Ok(ids
            .iter()
            .map(|t| t.0.to_string())
            .collect::<Vec<_>>()
            .join(" "))
    }

    fn parse(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map_while(|w| w.parse().ok().map(TokenId))
            .collect()
    }
}

/// True iff rendering then parsing reproduces both trigger and target.
pub fn roundtrip_check(
    renderer: &dyn TokenRenderer,
    pair: &FingerprintPair,
) -> Result<bool, VerifyError> {
    for ids in [&pair.trigger, &pair.target] {
        if renderer.parse(&renderer.render(ids)?) != *ids {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    /// Scheme, host and port, e.g. `http://127.0.0.1:8000`.
    pub endpoint: String,
    pub path: String,
    pub timeout: Duration,
    /// Sent as a bearer token when present.
    pub api_key: Option<String>,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            path: DEFAULT_PATH.to_string(),
            timeout: DEFAULT_TIMEOUT,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }

    pub fn url(&self) -> String {
        format!("{}{}", self.endpoint.trim_end_matches('/'), self.path)
    }
}

fn request_body(prompt: String, max_tokens: usize, mode: &DecodeMode) -> Value {
    match mode {
        DecodeMode::Greedy => json!({
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": 0,
        }),
        DecodeMode::Sampled { config, seed } => json!({
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": config.temperature,
            "top_k": config.top_k,
            "top_p": config.top_p,
            "seed": seed,
        }),
    }
}

fn completion_text(body: &Value) -> Result<&str, VerifyError> {
    body.get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("text"))
        .and_then(Value::as_str)
        .ok_or_else(|| VerifyError::ResponseUnparsable("missing choices[0].text".into()))
}

/// Sends the rendered trigger to `config.url()` and parses the first choice.
///
/// The pair must survive [`roundtrip_check`] first. Timeouts, connection
/// failures and HTTP error statuses are `Transport` errors, never a
/// negative result.
pub fn verify_remote(
    config: &RemoteConfig,
    pair: &FingerprintPair,
    renderer: &dyn TokenRenderer,
    mode: &DecodeMode,
) -> Result<VerificationResult, VerifyError> {
    if !roundtrip_check(renderer, pair)? {
        return Err(VerifyError::RenderRoundTripFailure);
    }
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(config.timeout))
        .build()
        .into();
    let body = request_body(
        renderer.render(&pair.trigger)?,
        pair.target.len() + REMOTE_SLACK,
        mode,
    );
    let start = Instant::now();
    let mut request = agent.post(config.url());
    if let Some(key) = &config.api_key {
        request = request.header("Authorization", format!("Bearer {key}"));
    }
    let response = request
        .send_json(&body)
        .map_err(|e| VerifyError::Transport(e.to_string()))?;
    let reply: Value = response.into_body().read_json().map_err(|e| match e {
        ureq::Error::Json(e) => VerifyError::ResponseUnparsable(e.to_string()),
        other => VerifyError::Transport(other.to_string()),
    })?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    let emitted = renderer.parse(completion_text(&reply)?);
    log::debug!("remote emitted {} ids in {latency_ms:.1} ms", emitted.len());
    Ok(VerificationResult {
        matched: is_match(&emitted, &pair.target),
        emitted,
        decode_mode: *mode,
        transport: Transport::Remote {
            endpoint: config.url(),
        },
        latency_ms,
    })
}

/// Runs every `(pair, mode)` check with at most `max_in_flight` requests
/// outstanding. Results come back in input order.
pub fn verify_remote_all(
    config: &RemoteConfig,
    checks: &[(FingerprintPair, DecodeMode)],
    renderer: &dyn TokenRenderer,
    max_in_flight: usize,
) -> Vec<Result<VerificationResult, VerifyError>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<VerificationResult, VerifyError>>>> =
        checks.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..max_in_flight.max(1).min(checks.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((pair, mode)) = checks.get(i) else {
                    break;
                };
                let result = verify_remote(config, pair, renderer, mode);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every slot filled"))
        .collect()
}
