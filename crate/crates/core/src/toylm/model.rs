//! Pre-norm decoder-only transformer with hand-written backward pass.
//!
//! All parameters live in one flat `Vec<f64>`; [`Layout`] names the slices.
//! Linear weights are stored `[in, out]` row-major, the unembedding `[vocab,
//! hidden]` so each token owns one contiguous row.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ToyLMConfig;
use super::LmError;
use crate::tensorio::{TokenId, UnembeddingMatrix};

const LN_EPS: f64 = 1e-5;
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockOffsets {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc_w: usize,
    fc_b: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    unembed: usize,
}

impl Layout {
    pub fn new(cfg: &ToyLMConfig) -> Self {
        let (v, d, c) = (cfg.vocab_size, cfg.hidden_dim, cfg.context_len);
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec {
                name,
                shape,
                offset,
            };
            offset += spec.len();
            let at = spec.offset;
            tensors.push(spec);
            at
        };
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let pos_emb = push("pos_emb".into(), vec![c, d]);
        let blocks = (0..cfg.layers)
            .map(|l| BlockOffsets {
                ln1_g: push(format!("block{l}.ln1.gain"), vec![d]),
                ln1_b: push(format!("block{l}.ln1.bias"), vec![d]),
                qkv_w: push(format!("block{l}.attn.qkv.weight"), vec![d, 3 * d]),
                qkv_b: push(format!("block{l}.attn.qkv.bias"), vec![3 * d]),
                proj_w: push(format!("block{l}.attn.proj.weight"), vec![d, d]),
                proj_b: push(format!("block{l}.attn.proj.bias"), vec![d]),
                ln2_g: push(format!("block{l}.ln2.gain"), vec![d]),
                ln2_b: push(format!("block{l}.ln2.bias"), vec![d]),
                fc_w: push(format!("block{l}.mlp.fc.weight"), vec![d, 4 * d]),
                fc_b: push(format!("block{l}.mlp.fc.bias"), vec![4 * d]),
                out_w: push(format!("block{l}.mlp.out.weight"), vec![4 * d, d]),
                out_b: push(format!("block{l}.mlp.out.bias"), vec![d]),
            })
            .collect();
        let lnf_g = push("lnf.gain".into(), vec![d]);
        let lnf_b = push("lnf.bias".into(), vec![d]);
        let unembed = if cfg.tied_unembedding {
            tok_emb
        } else {
            push("unembed".into(), vec![v, d])
        };
        Self {
            tensors,
            total: offset,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            unembed,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn unembed_offset(&self) -> usize {
        self.unembed
    }

    pub fn tok_emb_offset(&self) -> usize {
        self.tok_emb
    }
}

/// One training example: `tokens` plus a mask over next-token predictions.
/// `loss_mask[t]` selects the prediction of `tokens[t + 1]` from prefix `..=t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl Example {
    /// Every next-token prediction counts.
    pub fn causal(tokens: Vec<TokenId>) -> Self {
        let n = tokens.len().saturating_sub(1);
        Self {
            tokens,
            loss_mask: vec![true; n],
        }
    }

    /// `prompt ++ completion`, scoring only the completion tokens.
    pub fn completion(prompt: &[TokenId], completion: &[TokenId]) -> Self {
        let tokens: Vec<TokenId> = prompt.iter().chain(completion).copied().collect();
        let n = tokens.len().saturating_sub(1);
        let first_scored = prompt.len().saturating_sub(1);
        let loss_mask = (0..n).map(|t| t >= first_scored).collect();
        Self { tokens, loss_mask }
    }

    pub fn scored_positions(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLM {
    pub(crate) config: ToyLMConfig,
    pub(crate) layout: Layout,
    pub(crate) params: Vec<f64>,
    pub(crate) seed: u64,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors
    }
}

impl ToyLM {
    /// Deterministic initialization from `seed` (ChaCha8 stream):
    ///
    /// * token/position embeddings and the unembedding: N(0, 0.02²)
    /// * linear weights: N(0, 1/fan_in); the two residual-branch output
    ///   projections are further divided by √(2·layers)
    /// * biases zero, layer-norm gains one
    ///
    /// Tensors are filled in layout order.
    pub fn new(config: ToyLMConfig, seed: u64) -> Result<Self, LmError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual_scale = (2.0 * config.layers as f64).sqrt();
        for spec in &layout.tensors {
            let name = spec.name.as_str();
            let std = if name.ends_with(".gain") {
                params[spec.range()].iter_mut().for_each(|p| *p = 1.0);
                continue;
            } else if name.ends_with(".bias") {
                continue;
            } else if matches!(name, "tok_emb" | "pos_emb" | "unembed") {
                EMBED_INIT_STD
            } else {
                let fan_in = spec.shape[0] as f64;
                let base = 1.0 / fan_in.sqrt();
                if name.ends_with("proj.weight") || name.ends_with("out.weight") {
                    base / residual_scale
                } else {
                    base
                }
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            for p in &mut params[spec.range()] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(Self {
            config,
            layout,
            params,
            seed,
        })
    }

    pub fn config(&self) -> &ToyLMConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// SHA-256 of the parameter bit patterns.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn unembedding_row(&self, id: TokenId) -> &[f64] {
        let d = self.config.hidden_dim;
        let at = self.layout.unembed + id.index() * d;
        &self.params[at..at + d]
    }

    /// The unembedding as f32 rows (round to nearest).
    pub fn export_unembedding(&self) -> UnembeddingMatrix {
        let (v, d) = (self.config.vocab_size, self.config.hidden_dim);
        let at = self.layout.unembed;
        let data = self.params[at..at + v * d]
            .iter()
            .map(|&p| p as f32)
            .collect();
        UnembeddingMatrix::new(v, d, data).expect("parameters are finite")
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), LmError> {
        if let Some(t) = tokens.iter().find(|t| t.index() >= self.config.vocab_size) {
            return Err(LmError::TokenOutOfRange {
                id: *t,
                vocab_size: self.config.vocab_size,
            });
        }
        if tokens.len() > self.config.context_len {
            return Err(LmError::SequenceTooLong {
                len: tokens.len(),
                context_len: self.config.context_len,
            });
        }
        Ok(())
    }

    /// Mean next-token cross-entropy over the scored positions of `batch`,
    /// and its gradient with respect to every parameter.
    ///
    /// Sequences are processed and accumulated in batch order.
    pub fn forward_loss(&self, batch: &[Example]) -> Result<(f64, Vec<f64>), LmError> {
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate_loss_grad(batch, Some(&mut grad))?;
        Ok((loss, grad))
    }

    /// Loss only; no gradient buffers are touched.
    pub fn loss(&self, batch: &[Example]) -> Result<f64, LmError> {
        self.accumulate_loss_grad(batch, None)
    }

    fn accumulate_loss_grad(
        &self,
        batch: &[Example],
        mut grad: Option<&mut Vec<f64>>,
    ) -> Result<f64, LmError> {
        for ex in batch {
            self.check_tokens(&ex.tokens)?;
            if ex.loss_mask.len() + 1 != ex.tokens.len().max(1) {
                return Err(LmError::MaskLength {
                    tokens: ex.tokens.len(),
                    mask: ex.loss_mask.len(),
                });
            }
        }
        let count: usize = batch.iter().map(Example::scored_positions).sum();
        if count == 0 {
            return Err(LmError::NothingToScore);
        }
        let scale = 1.0 / count as f64;
        let mut total = 0.0;
        for ex in batch {
            if ex.scored_positions() == 0 {
                continue;
            }
            let cache = self.forward(&ex.tokens);
            total += match grad.as_deref_mut() {
                Some(g) => self.backward(&cache, ex, scale, g),
                None => self.score(&cache, ex),
            };
        }
        Ok(total * scale)
    }

    /// Logits for the token following `tokens`.
    pub fn next_logits(&self, tokens: &[TokenId]) -> Result<Vec<f64>, LmError> {
        if tokens.is_empty() {
            return Err(LmError::EmptyPrompt);
        }
        self.check_tokens(tokens)?;
        let cache = self.forward(tokens);
        Ok(self.logits_at(&cache, tokens.len() - 1))
    }

    /// Logits for every prefix of `tokens` (`[len][vocab]`).
    pub fn all_logits(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>, LmError> {
        self.check_tokens(tokens)?;
        let cache = self.forward(tokens);
        Ok((0..tokens.len())
            .map(|t| self.logits_at(&cache, t))
            .collect())
    }

    fn logits_at(&self, cache: &Cache, t: usize) -> Vec<f64> {
        let d = self.config.hidden_dim;
        let h = &cache.hf[t * d..(t + 1) * d];
        let u = &self.params[self.layout.unembed..self.layout.unembed + self.config.vocab_size * d];
        u.chunks_exact(d).map(|row| dot(row, h)).collect()
    }

    fn forward(&self, tokens: &[TokenId]) -> Cache {
        let cfg = &self.config;
        let (d, t_len, nh, hd) = (cfg.hidden_dim, tokens.len(), cfg.heads, cfg.head_dim());
        let p = &self.params;
        let lay = &self.layout;

        let mut x = vec![0.0; t_len * d];
        for (t, tok) in tokens.iter().enumerate() {
            let e = &p[lay.tok_emb + tok.index() * d..][..d];
            let pe = &p[lay.pos_emb + t * d..][..d];
            for ((xv, ev), pv) in x[t * d..(t + 1) * d].iter_mut().zip(e).zip(pe) {
                *xv = ev + pv;
            }
        }

        let mut blocks = Vec::with_capacity(cfg.layers);
        for off in &lay.blocks {
            let x_in = x.clone();
            let ln1 = layer_norm(&x_in, &p[off.ln1_g..][..d], &p[off.ln1_b..][..d], t_len, d);

            let mut qkv = broadcast_bias(&p[off.qkv_b..][..3 * d], t_len);
            matmul_acc(
                &mut qkv,
                &ln1.out,
                &p[off.qkv_w..][..d * 3 * d],
                t_len,
                d,
                3 * d,
            );

            let scale = 1.0 / (hd as f64).sqrt();
            let mut att = vec![0.0; nh * t_len * t_len];
            let mut y = vec![0.0; t_len * d];
            for h in 0..nh {
                for i in 0..t_len {
                    let q = &qkv[i * 3 * d + h * hd..][..hd];
                    let row = &mut att[(h * t_len + i) * t_len..][..t_len];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let k = &qkv[j * 3 * d + d + h * hd..][..hd];
                        row[j] = dot(q, k) * scale;
                        max = max.max(row[j]);
                    }
                    let mut sum = 0.0;
                    for a in &mut row[..=i] {
                        *a = (*a - max).exp();
                        sum += *a;
                    }
                    let yi = &mut y[i * d + h * hd..][..hd];
                    for j in 0..=i {
                        row[j] /= sum;
                        let v = &qkv[j * 3 * d + 2 * d + h * hd..][..hd];
                        axpy(yi, row[j], v);
                    }
                }
            }

            let mut attn_out = broadcast_bias(&p[off.proj_b..][..d], t_len);
            matmul_acc(&mut attn_out, &y, &p[off.proj_w..][..d * d], t_len, d, d);
            let x_mid: Vec<f64> = x_in.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

            let ln2 = layer_norm(&x_mid, &p[off.ln2_g..][..d], &p[off.ln2_b..][..d], t_len, d);
            let mut pre = broadcast_bias(&p[off.fc_b..][..4 * d], t_len);
            matmul_acc(
                &mut pre,
                &ln2.out,
                &p[off.fc_w..][..d * 4 * d],
                t_len,
                d,
                4 * d,
            );
            let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
            let mut mlp_out = broadcast_bias(&p[off.out_b..][..d], t_len);
            matmul_acc(
                &mut mlp_out,
                &act,
                &p[off.out_w..][..4 * d * d],
                t_len,
                4 * d,
                d,
            );
            x = x_mid.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();

            blocks.push(BlockCache {
                ln1,
                qkv,
                att,
                y,
                ln2,
                pre,
                act,
            });
        }

        let lnf = layer_norm(&x, &p[lay.lnf_g..][..d], &p[lay.lnf_b..][..d], t_len, d);
        Cache {
            hf: lnf.out.clone(),
            lnf,
            blocks,
        }
    }

    /// Sum of cross-entropies at the scored positions.
    fn score(&self, cache: &Cache, ex: &Example) -> f64 {
        let mut total = 0.0;
        for (t, _) in ex.loss_mask.iter().enumerate().filter(|(_, &m)| m) {
            let logits = self.logits_at(cache, t);
            total += cross_entropy(&logits, ex.tokens[t + 1].index());
        }
        total
    }

    /// Adds `scale * dLoss/dθ` for this example into `grad` and returns the
    /// summed cross-entropy over its scored positions.
    fn backward(&self, cache: &Cache, ex: &Example, scale: f64, grad: &mut [f64]) -> f64 {
        let cfg = &self.config;
        let (d, v, t_len, nh, hd) = (
            cfg.hidden_dim,
            cfg.vocab_size,
            ex.tokens.len(),
            cfg.heads,
            cfg.head_dim(),
        );
        let p = &self.params;
        let lay = &self.layout;
        let mut total = 0.0;

        // Unembedding and final hidden state.
        let mut dhf = vec![0.0; t_len * d];
        let u_at = lay.unembed;
        for (t, _) in ex.loss_mask.iter().enumerate().filter(|(_, &m)| m) {
            let logits = self.logits_at(cache, t);
            let target = ex.tokens[t + 1].index();
            let (loss, probs) = softmax_ce(&logits, target);
            total += loss;
            let h = &cache.hf[t * d..(t + 1) * d];
            let dh = &mut dhf[t * d..(t + 1) * d];
            for (tok, &pr) in probs.iter().enumerate().take(v) {
                let g = (pr - if tok == target { 1.0 } else { 0.0 }) * scale;
                if g == 0.0 {
                    continue;
                }
                let row = u_at + tok * d;
                axpy(dh, g, &p[row..row + d]);
                axpy(&mut grad[row..row + d], g, h);
            }
        }

        let mut dx = layer_norm_backward(
            &cache.lnf,
            &dhf,
            &p[lay.lnf_g..][..d],
            grad,
            lay.lnf_g,
            lay.lnf_b,
            t_len,
            d,
        );

        for (off, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
            // MLP branch.
            add_bias_grad(&mut grad[off.out_b..][..d], &dx, t_len, d);
            outer_acc(
                &mut grad[off.out_w..][..4 * d * d],
                &bc.act,
                &dx,
                t_len,
                4 * d,
                d,
            );
            let mut dpre = vec![0.0; t_len * 4 * d];
            matmul_wt(
                &mut dpre,
                &dx,
                &p[off.out_w..][..4 * d * d],
                t_len,
                4 * d,
                d,
            );
            for (g, &z) in dpre.iter_mut().zip(&bc.pre) {
                *g *= gelu_grad(z);
            }
            add_bias_grad(&mut grad[off.fc_b..][..4 * d], &dpre, t_len, 4 * d);
            outer_acc(
                &mut grad[off.fc_w..][..d * 4 * d],
                &bc.ln2.out,
                &dpre,
                t_len,
                d,
                4 * d,
            );
            let mut dln2 = vec![0.0; t_len * d];
            matmul_wt(
                &mut dln2,
                &dpre,
                &p[off.fc_w..][..d * 4 * d],
                t_len,
                d,
                4 * d,
            );
            let dmid = layer_norm_backward(
                &bc.ln2,
                &dln2,
                &p[off.ln2_g..][..d],
                grad,
                off.ln2_g,
                off.ln2_b,
                t_len,
                d,
            );
            for (a, b) in dx.iter_mut().zip(&dmid) {
                *a += b;
            }

            // Attention branch.
            add_bias_grad(&mut grad[off.proj_b..][..d], &dx, t_len, d);
            outer_acc(&mut grad[off.proj_w..][..d * d], &bc.y, &dx, t_len, d, d);
            let mut dy = vec![0.0; t_len * d];
            matmul_wt(&mut dy, &dx, &p[off.proj_w..][..d * d], t_len, d, d);

            let scale_qk = 1.0 / (hd as f64).sqrt();
            let mut dqkv = vec![0.0; t_len * 3 * d];
            let mut datt = vec![0.0; t_len];
            for h in 0..nh {
                for i in 0..t_len {
                    let a_row = &bc.att[(h * t_len + i) * t_len..][..t_len];
                    let dyi = &dy[i * d + h * hd..][..hd];
                    // dA and dV
                    for j in 0..=i {
                        let vj = &bc.qkv[j * 3 * d + 2 * d + h * hd..][..hd];
                        datt[j] = dot(dyi, vj);
                        let dv = &mut dqkv[j * 3 * d + 2 * d + h * hd..][..hd];
                        axpy(dv, a_row[j], dyi);
                    }
                    // softmax backward
                    let inner: f64 = (0..=i).map(|j| a_row[j] * datt[j]).sum();
                    for j in 0..=i {
                        let ds = a_row[j] * (datt[j] - inner) * scale_qk;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &bc.qkv[j * 3 * d + d + h * hd..][..hd];
                        let qi = &bc.qkv[i * 3 * d + h * hd..][..hd];
                        axpy(&mut dqkv[i * 3 * d + h * hd..][..hd], ds, kj);
                        axpy(&mut dqkv[j * 3 * d + d + h * hd..][..hd], ds, qi);
                    }
                }
            }
            add_bias_grad(&mut grad[off.qkv_b..][..3 * d], &dqkv, t_len, 3 * d);
            outer_acc(
                &mut grad[off.qkv_w..][..d * 3 * d],
                &bc.ln1.out,
                &dqkv,
                t_len,
                d,
                3 * d,
            );
            let mut dln1 = vec![0.0; t_len * d];
            matmul_wt(
                &mut dln1,
                &dqkv,
                &p[off.qkv_w..][..d * 3 * d],
                t_len,
                d,
                3 * d,
            );
            let din = layer_norm_backward(
                &bc.ln1,
                &dln1,
                &p[off.ln1_g..][..d],
                grad,
                off.ln1_g,
                off.ln1_b,
                t_len,
                d,
            );
            for (a, b) in dx.iter_mut().zip(&din) {
                *a += b;
            }
        }

        for (t, tok) in ex.tokens.iter().enumerate() {
            let g = &dx[t * d..(t + 1) * d];
            axpy(&mut grad[lay.tok_emb + tok.index() * d..][..d], 1.0, g);
            axpy(&mut grad[lay.pos_emb + t * d..][..d], 1.0, g);
        }
        total
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    out: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    qkv: Vec<f64>,
    att: Vec<f64>,
    y: Vec<f64>,
    ln2: LnCache,
    pre: Vec<f64>,
    act: Vec<f64>,
}

struct Cache {
    hf: Vec<f64>,
    #[allow(dead_code)]
    lnf: LnCache,
    blocks: Vec<BlockCache>,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize; order is fixed.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * c + k] * b[4 * c + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

fn broadcast_bias(b: &[f64], rows: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * b.len());
    for _ in 0..rows {
        out.extend_from_slice(b);
    }
    out
}

/// `out[n×m] += a[n×k] · w[k×m]`
fn matmul_acc(out: &mut [f64], a: &[f64], w: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av != 0.0 {
                axpy(o, av, &w[kk * m..(kk + 1) * m]);
            }
        }
    }
}

/// `out[n×k] = d[n×m] · wᵀ` where `w` is `[k×m]`.
fn matmul_wt(out: &mut [f64], d: &[f64], w: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let di = &d[i * m..(i + 1) * m];
        for kk in 0..k {
            out[i * k + kk] = dot(di, &w[kk * m..(kk + 1) * m]);
        }
    }
}

/// `dw[k×m] += aᵀ · d` where `a` is `[n×k]`, `d` is `[n×m]`.
fn outer_acc(dw: &mut [f64], a: &[f64], d: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let di = &d[i * m..(i + 1) * m];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av != 0.0 {
                axpy(&mut dw[kk * m..(kk + 1) * m], av, di);
            }
        }
    }
}

fn add_bias_grad(db: &mut [f64], d: &[f64], n: usize, m: usize) {
    for i in 0..n {
        axpy(db, 1.0, &d[i * m..(i + 1) * m]);
    }
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], n: usize, d: usize) -> LnCache {
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[i * d + j] = xh;
            out[i * d + j] = xh * gain[j] + bias[j];
        }
    }
    LnCache { xhat, rstd, out }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    cache: &LnCache,
    dout: &[f64],
    gain: &[f64],
    grad: &mut [f64],
    gain_at: usize,
    bias_at: usize,
    n: usize,
    d: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dy = &dout[i * d..(i + 1) * d];
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            grad[gain_at + j] += dy[j] * xh[j];
            grad[bias_at + j] += dy[j];
            let dxh = dy[j] * gain[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        let r = cache.rstd[i];
        for j in 0..d {
            let dxh = dy[j] * gain[j];
            dx[i * d + j] = r * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh())
}

fn gelu_grad(z: f64) -> f64 {
    let u = GELU_C * (z + 0.044715 * z * z * z);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * z * z);
    0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * du
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    log_sum_exp(logits) - logits[target]
}

fn softmax_ce(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    (cross_entropy(logits, target), softmax(logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyLMConfig {
        ToyLMConfig {
            vocab_size: 40,
            reserved_count: 8,
            hidden_dim: 8,
            layers: 1,
            heads: 2,
            context_len: 24,
            tied_unembedding: false,
        }
    }

    fn toks(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn parameter_count_matches_formula() {
        for cfg in [ToyLMConfig::default(), tiny()] {
            let m = ToyLM::new(cfg.clone(), 0).unwrap();
            assert_eq!(m.parameter_count(), cfg.parameter_count());
        }
        // 512*64 + 64*64 + 2*(12*64*64 + 13*64) + 2*64 + 512*64
        assert_eq!(ToyLMConfig::default().parameter_count(), 169_728);
        let tied = ToyLMConfig {
            tied_unembedding: true,
            ..ToyLMConfig::default()
        };
        assert_eq!(
            ToyLM::new(tied, 0).unwrap().parameter_count(),
            169_728 - 512 * 64
        );
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = ToyLM::new(tiny(), 42).unwrap();
        let b = ToyLM::new(tiny(), 42).unwrap();
        assert!(a
            .params
            .iter()
            .zip(&b.params)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a.digest(), ToyLM::new(tiny(), 43).unwrap().digest());
    }

    #[test]
    fn invalid_head_split() {
        let cfg = ToyLMConfig {
            heads: 3,
            ..ToyLMConfig::default()
        };
        assert!(matches!(ToyLM::new(cfg, 0), Err(LmError::InvalidConfig(_))));
        let short = ToyLMConfig {
            context_len: 20,
            ..ToyLMConfig::default()
        };
        assert!(matches!(
            ToyLM::new(short, 0),
            Err(LmError::InvalidConfig(_))
        ));
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let mut m = ToyLM::new(tiny(), 1).unwrap();
        let spec = m.layout.tensor("unembed").unwrap().clone();
        m.params[spec.range()].iter_mut().for_each(|p| *p = 0.0);
        let loss = m.loss(&[Example::causal(toks(&[1, 2, 3, 4, 5]))]).unwrap();
        assert!((loss - 40f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn too_long_sequence() {
        let m = ToyLM::new(tiny(), 1).unwrap();
        let ex = Example::causal(vec![TokenId(1); 25]);
        assert!(matches!(
            m.forward_loss(&[ex]),
            Err(LmError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn completion_mask_covers_only_completion() {
        let ex = Example::completion(&toks(&[1, 2, 3]), &toks(&[4, 5]));
        assert_eq!(ex.tokens.len(), 5);
        assert_eq!(ex.loss_mask, vec![false, false, true, true]);
    }

    #[test]
    fn loss_is_mean_over_scored_positions() {
        let m = ToyLM::new(tiny(), 3).unwrap();
        let ex = Example::completion(&toks(&[1, 2, 3, 4]), &toks(&[5, 6]));
        let logits = m.all_logits(&ex.tokens).unwrap();
        let manual = (cross_entropy(&logits[3], 5) + cross_entropy(&logits[4], 6)) / 2.0;
        assert!((m.loss(&[ex]).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn export_matches_parameters() {
        let m = ToyLM::new(tiny(), 5).unwrap();
        let u = m.export_unembedding();
        assert_eq!((u.rows(), u.cols()), (40, 8));
        for i in 0..40 {
            let row = m.unembedding_row(TokenId(i));
            assert!(u
                .row(i as usize)
                .iter()
                .zip(row)
                .all(|(a, &b)| a.to_bits() == (b as f32).to_bits()));
        }
    }

    #[test]
    fn tied_export_is_token_embedding() {
        let cfg = ToyLMConfig {
            tied_unembedding: true,
            ..tiny()
        };
        let m = ToyLM::new(cfg, 5).unwrap();
        let at = m.layout.tok_emb_offset();
        assert_eq!(m.layout.unembed_offset(), at);
        assert_eq!(m.export_unembedding().data()[0], m.params[at] as f32);
    }
}
