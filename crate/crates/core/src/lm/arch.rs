use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub tie_output_head: bool,
}

impl ArchConfig {
    /// Desk-scale default: 2 layers, width 64, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context_len: 32,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            tie_output_head: false,
        }
    }

    /// The smallest model used for explicit kernel computations.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context_len: 16,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            tie_output_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("invalid arch: {m}")));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.context_len == 0 {
            return bad("context_len must be positive");
        }
        if self.d_model == 0 || self.n_heads == 0 {
            return bad("d_model and n_heads must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("n_heads must divide d_model");
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, c, d, f) = (self.vocab_size, self.context_len, self.d_model, self.d_ff());
        let per_layer = 4 * d * d + 4 * d // attention weights and biases
            + 2 * 2 * d // two layer norms
            + d * f + f + f * d + d; // mlp
        let head = if self.tie_output_head { 0 } else { d * v };
        v * d + c * d + self.n_layers * per_layer + 2 * d + head
    }
}
