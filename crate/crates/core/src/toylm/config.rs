use serde::{Deserialize, Serialize};

use super::LmError;
use crate::tensorio::TokenId;

/// Longest trigger plus target length the model must hold in context.
pub const MIN_CONTEXT: usize = 15 + 5 + 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLMConfig {
    pub vocab_size: usize,
    /// The top `reserved_count` ids never occur in pretraining data.
    pub reserved_count: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context_len: usize,
    pub tied_unembedding: bool,
}

impl Default for ToyLMConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            reserved_count: 64,
            hidden_dim: 64,
            layers: 2,
            heads: 4,
            context_len: 64,
            tied_unembedding: false,
        }
    }
}

impl ToyLMConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |msg: String| Err(LmError::InvalidConfig(msg));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.reserved_count >= self.vocab_size {
            return bad(format!(
                "reserved_count {} leaves no ordinary tokens in a vocabulary of {}",
                self.reserved_count, self.vocab_size
            ));
        }
        if self.hidden_dim == 0 || self.heads == 0 || self.layers == 0 {
            return bad("hidden_dim, heads and layers must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.context_len < MIN_CONTEXT {
            return bad(format!("context_len {} < {MIN_CONTEXT}", self.context_len));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// First reserved id; every id at or above it is reserved.
    pub fn first_reserved(&self) -> usize {
        self.vocab_size - self.reserved_count
    }

    pub fn reserved_ids(&self) -> Vec<TokenId> {
        (self.first_reserved()..self.vocab_size)
            .map(|i| TokenId(i as u32))
            .collect()
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        id.index() >= self.first_reserved()
    }

    /// Closed-form parameter count.
    ///
    /// Per block: two layer norms (4D), fused QKV (3D² + 3D), output
    /// projection (D² + D), MLP up (4D² + 4D) and down (4D² + D).
    pub fn parameter_count(&self) -> usize {
        let (v, d, c, l) = (
            self.vocab_size,
            self.hidden_dim,
            self.context_len,
            self.layers,
        );
        let block = 12 * d * d + 13 * d;
        let unembed = if self.tied_unembedding { 0 } else { v * d };
        v * d + c * d + l * block + 2 * d + unembed
    }
}
