//! Training loops. Every path (pretraining, fingerprint SFT, downstream
//! fine-tuning) runs the same optimizer, see [`Optimizer`].

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::corpus::epoch_order;
use super::decode::greedy_decode;
use super::model::{Example, ToyLM};
use super::LmError;
use crate::tensorio::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub shuffle_seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 16,
            clip_norm: Some(1.0),
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub epochs: Vec<EpochRecord>,
    pub seconds: f64,
    /// Learning rate actually used (after any SFT escalation).
    pub lr: f64,
    pub base_lr: f64,
    pub attempts: usize,
    pub steps: usize,
    /// Loss over the full training set after the last update.
    pub final_loss: Option<f64>,
}

impl TrainStats {
    fn empty(lr: f64) -> Self {
        Self {
            epochs: Vec::new(),
            seconds: 0.0,
            lr,
            base_lr: lr,
            attempts: 0,
            steps: 0,
            final_loss: None,
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// One JSON object per epoch: `{"epoch":..,"loss":..,"seconds":..}`.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("record serializes") + "\n")
            .collect()
    }
}

/// Adam with bias correction (β₁ = 0.9, β₂ = 0.999, ε = 1e-8), no weight
/// decay, no warmup. State is fresh for every training call.
pub struct Optimizer {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + Self::EPS);
        }
    }
}

fn clip(grad: &mut [f64], max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if n > max {
            let s = max / n;
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
}

fn run_epochs(
    model: &mut ToyLM,
    examples: &[Example],
    epochs: usize,
    lr: f64,
    opts: &TrainOptions,
) -> Result<TrainStats, LmError> {
    if opts.batch_size == 0 {
        return Err(LmError::InvalidOptions(
            "batch_size must be positive".into(),
        ));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(LmError::InvalidOptions(format!(
            "learning rate {lr} must be positive"
        )));
    }
    let mut stats = TrainStats::empty(lr);
    if epochs == 0 {
        return Ok(stats);
    }
    let start = Instant::now();
    let mut opt = Optimizer::new(model.params.len(), lr);
    for epoch in 0..epochs {
        let epoch_start = Instant::now();
        let order = epoch_order(examples.len(), opts.shuffle_seed, epoch);
        let mut weighted = 0.0;
        let mut scored = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let n: usize = batch.iter().map(Example::scored_positions).sum();
            if n == 0 {
                continue;
            }
            let (loss, mut grad) = model.forward_loss(&batch)?;
            weighted += loss * n as f64;
            scored += n;
            clip(&mut grad, opts.clip_norm);
            opt.step(&mut model.params, &grad);
            stats.steps += 1;
        }
        let loss = weighted / scored.max(1) as f64;
        log::debug!("epoch {} loss {loss:.5}", epoch + 1);
        stats.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
    }
    stats.attempts = 1;
    stats.seconds = start.elapsed().as_secs_f64();
    Ok(stats)
}

fn causal_examples(model: &ToyLM, corpus: &[Vec<TokenId>]) -> Result<Vec<Example>, LmError> {
    if corpus.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    let examples: Vec<Example> = corpus
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| Example::causal(s.clone()))
        .collect();
    for ex in &examples {
        model.check_tokens(&ex.tokens)?;
    }
    if examples.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    Ok(examples)
}

/// Next-token training on a corpus that must not contain reserved ids.
pub fn pretrain(
    model: &mut ToyLM,
    corpus: &[Vec<TokenId>],
    epochs: usize,
    lr: f64,
    opts: &TrainOptions,
) -> Result<TrainStats, LmError> {
    let cfg = model.config().clone();
    for (i, seq) in corpus.iter().enumerate() {
        if let Some(&id) = seq.iter().find(|&&t| cfg.is_reserved(t)) {
            if id.index() < cfg.vocab_size {
                return Err(LmError::ReservedTokenInCorpus { id, sequence: i });
            }
        }
    }
    let examples = causal_examples(model, corpus)?;
    run_epochs(model, &examples, epochs, lr, opts)
}

/// Downstream fine-tuning; reserved ids are allowed.
pub fn finetune(
    model: &mut ToyLM,
    corpus: &[Vec<TokenId>],
    epochs: usize,
    lr: f64,
    opts: &TrainOptions,
) -> Result<TrainStats, LmError> {
    let examples = causal_examples(model, corpus)?;
    run_epochs(model, &examples, epochs, lr, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftOptions {
    pub epochs: usize,
    pub lr: f64,
    /// Factor applied to the learning rate after a failed attempt.
    pub lr_multiplier: f64,
    /// Retries after the first attempt; 0 disables escalation.
    pub max_escalations: usize,
    /// An attempt succeeds when the post-training masked loss is at most
    /// this and greedy decoding of every row reproduces its target.
    pub loss_target: f64,
    pub train: TrainOptions,
}

impl Default for SftOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 2e-5,
            lr_multiplier: 10.0,
            max_escalations: 4,
            loss_target: 0.05,
            train: TrainOptions {
                batch_size: 1,
                clip_norm: Some(1.0),
                shuffle_seed: 0,
            },
        }
    }
}

/// Embeds `rows` (trigger, target) with the loss masked to target tokens.
///
/// Each attempt starts from the incoming parameters. When an attempt misses
/// `loss_target`, the learning rate is multiplied by `lr_multiplier` and the
/// run repeated, up to `max_escalations` times; the last attempt is kept
/// either way. `seconds` covers all attempts.
pub fn sft_embed(
    model: &mut ToyLM,
    rows: &[(Vec<TokenId>, Vec<TokenId>)],
    opts: &SftOptions,
) -> Result<TrainStats, LmError> {
    if rows.is_empty() {
        return Err(LmError::EmptyRows);
    }
    if opts.lr_multiplier.is_nan() || opts.lr_multiplier < 1.0 {
        return Err(LmError::InvalidOptions(
            "lr_multiplier must be at least 1".into(),
        ));
    }
    let examples: Vec<Example> = rows
        .iter()
        .map(|(x, y)| Example::completion(x, y))
        .collect();
    for ex in &examples {
        model.check_tokens(&ex.tokens)?;
    }
    let start = Instant::now();
    let initial = model.params.clone();
    let mut lr = opts.lr;
    let mut attempt = 0;
    loop {
        attempt += 1;
        model.params.copy_from_slice(&initial);
        let mut stats = run_epochs(model, &examples, opts.epochs, lr, &opts.train)?;
        let final_loss = model.loss(&examples)?;
        stats.final_loss = Some(final_loss);
        let reproduces = rows
            .iter()
            .map(|(x, y)| greedy_decode(model, x, y.len()).map(|out| &out == y))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .all(|ok| ok);
        let done = final_loss <= opts.loss_target && reproduces;
        log::info!(
            "sft attempt {attempt} lr {lr:e}: loss {final_loss:.3e}, reproduces {reproduces}"
        );
        if done || attempt > opts.max_escalations || opts.epochs == 0 {
            stats.base_lr = opts.lr;
            stats.attempts = attempt;
            stats.seconds = start.elapsed().as_secs_f64();
            return Ok(stats);
        }
        lr *= opts.lr_multiplier;
    }
}

/// `exp` of the mean next-token cross-entropy over every position.
pub fn perplexity(model: &ToyLM, corpus: &[Vec<TokenId>]) -> Result<f64, LmError> {
    let examples = causal_examples(model, corpus)?;
    let mut weighted = 0.0;
    let mut count = 0usize;
    for chunk in examples.chunks(64) {
        let n: usize = chunk.iter().map(Example::scored_positions).sum();
        weighted += model.loss(chunk)? * n as f64;
        count += n;
    }
    Ok((weighted / count as f64).exp())
}

/// Mean logit of every vocabulary entry over all positions of `probe`.
pub fn mean_logits(model: &ToyLM, probe: &[Vec<TokenId>]) -> Result<Vec<f64>, LmError> {
    let mut acc = vec![0.0; model.config().vocab_size];
    let mut count = 0usize;
    for seq in probe {
        for logits in model.all_logits(seq)? {
            for (a, l) in acc.iter_mut().zip(&logits) {
                *a += l;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(LmError::EmptyCorpus);
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Ok(acc)
}
