//! Transformer configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale default: 6 pre-norm layers, d_model 128, 8 heads, learned
    /// positional embeddings.
    pub fn desk_default(vocab_size: usize, max_seq_len: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 6,
            d_model: 128,
            n_heads: 8,
            d_head: 16,
            d_mlp: 512,
            vocab_size,
            max_seq_len,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::InvalidConfig(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.n_layers == 0
            || self.d_mlp == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
            || self.norm_eps <= 0.0
        {
            return Err(Error::InvalidConfig(
                "model dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}
