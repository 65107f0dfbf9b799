//! A desk-scale autoregressive transformer standing in for the model being
//! fingerprinted: pretraining, fingerprint SFT, downstream fine-tuning,
//! decoding and unembedding export.

mod checkpoint;
mod config;
pub mod corpus;
mod decode;
mod model;
mod train;

use thiserror::Error;

use crate::tensorio::{TensorIoError, TokenId};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ToyLMConfig, MIN_CONTEXT};
pub use decode::{greedy_decode, nucleus_distribution, sample_decode, SamplingConfig};
pub use model::{cross_entropy, softmax, Example, Layout, TensorSpec, ToyLM};
pub use train::{
    finetune, mean_logits, perplexity, pretrain, sft_embed, EpochRecord, SftOptions, TrainOptions,
    TrainStats,
};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds context length {context_len}")]
    SequenceTooLong { len: usize, context_len: usize },
    #[error(
        "prompt of {prompt} tokens plus {max_new} new tokens exceeds context length {context_len}"
    )]
    PromptTooLong {
        prompt: usize,
        max_new: usize,
        context_len: usize,
    },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("token {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("reserved token {id} found in pretraining corpus (sequence {sequence})")]
    ReservedTokenInCorpus { id: TokenId, sequence: usize },
    #[error("loss mask has {mask} entries for {tokens} tokens")]
    MaskLength { tokens: usize, mask: usize },
    #[error("no scored positions in batch")]
    NothingToScore,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no training rows")]
    EmptyRows,
    #[error("invalid sampling config: {0}")]
    InvalidSamplingConfig(String),
    #[error("invalid training options: {0}")]
    InvalidOptions(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] TensorIoError),
}
