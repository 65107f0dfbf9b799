use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::ToyLM;
use super::LmError;
use crate::tensorio::TokenId;

fn check_prompt(model: &ToyLM, prompt: &[TokenId], max_new: usize) -> Result<(), LmError> {
    if prompt.is_empty() {
        return Err(LmError::EmptyPrompt);
    }
    let context_len = model.config().context_len;
    // The last generated token is never fed back.
    if prompt.len() + max_new.saturating_sub(1) > context_len {
        return Err(LmError::PromptTooLong {
            prompt: prompt.len(),
            max_new,
            context_len,
        });
    }
    Ok(())
}

/// Index of the largest logit, lowest index on ties.
pub(crate) fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

/// Emits exactly `max_new` tokens by repeated argmax.
pub fn greedy_decode(
    model: &ToyLM,
    prompt: &[TokenId],
    max_new: usize,
) -> Result<Vec<TokenId>, LmError> {
    check_prompt(model, prompt, max_new)?;
    let mut ctx = prompt.to_vec();
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let next = TokenId(argmax(&model.next_logits(&ctx)?) as u32);
        out.push(next);
        ctx.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            top_k: 50,
            top_p: 0.95,
            temperature: 0.7,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: String| Err(LmError::InvalidSamplingConfig(m));
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        Ok(())
    }
}

/// The renormalized candidate distribution for one decoding step.
///
/// Logits are divided by the temperature, the `top_k` highest kept (ties by
/// lower id), then the shortest prefix whose cumulative probability reaches
/// `top_p`. Candidates come back in descending-probability order.
pub fn nucleus_distribution(
    logits: &[f64],
    cfg: &SamplingConfig,
) -> Result<Vec<(TokenId, f64)>, LmError> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k.min(logits.len()));

    let scaled: Vec<f64> = order.iter().map(|&i| logits[i] / cfg.temperature).collect();
    let probs = super::model::softmax(&scaled);

    let mut keep = probs.len();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if cum >= cfg.top_p {
            keep = i + 1;
            break;
        }
    }
    let mass: f64 = probs[..keep].iter().sum();
    Ok(order
        .into_iter()
        .zip(probs)
        .take(keep)
        .map(|(i, p)| (TokenId(i as u32), p / mass))
        .collect())
}

/// Top-k then top-p sampling, deterministic given `seed` (ChaCha8).
pub fn sample_decode(
    model: &ToyLM,
    prompt: &[TokenId],
    max_new: usize,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<Vec<TokenId>, LmError> {
    cfg.validate()?;
    check_prompt(model, prompt, max_new)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = prompt.to_vec();
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let dist = nucleus_distribution(&model.next_logits(&ctx)?, cfg)?;
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut next = dist[dist.len() - 1].0;
        for &(tok, p) in &dist {
            cum += p;
            if u < cum {
                next = tok;
                break;
            }
        }
        out.push(next);
        ctx.push(next);
    }
    Ok(out)
}
