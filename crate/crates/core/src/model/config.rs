use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture of the encoder-decoder with Medusa heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub attn_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Extra decoding heads beyond the main next-token head. Zero disables Medusa.
    pub medusa_heads: usize,
    pub medusa_hidden: usize,
    pub vocab_size: usize,
    /// Longest source or decoder input, in tokens.
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

/// Hidden width of each extra head in the full-size preset. With d_model 256
/// and 20 heads this is the width whose head total lands closest to 1.3M.
pub const PAPER_MEDUSA_HIDDEN: usize = 125;

impl ModelConfig {
    /// Full-size preset: 6+6 layers, 8 attention heads, width 256, FFN 2048, 20 extra heads.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            layers_enc: 6,
            layers_dec: 6,
            attn_heads: 8,
            d_model: 256,
            d_ff: 2048,
            medusa_heads: 20,
            medusa_hidden: PAPER_MEDUSA_HIDDEN,
            vocab_size,
            max_len: 512,
            dropout: 0.1,
            seed: 0,
        }
    }

    /// Desk-scale preset used for the synthetic corpus.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            layers_enc: 2,
            layers_dec: 2,
            attn_heads: 4,
            d_model: 64,
            d_ff: 256,
            medusa_heads: 8,
            medusa_hidden: 64,
            vocab_size,
            max_len: 128,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.attn_heads
    }

    /// Rows of the logits block per position: the main head plus the extra heads.
    pub fn output_heads(&self) -> usize {
        self.medusa_heads + 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidConfig(msg.to_owned()));
        if self.d_model == 0 || self.attn_heads == 0 {
            return bad("d_model and attn_heads must be positive");
        }
        if self.d_model % self.attn_heads != 0 {
            return bad("d_model must be divisible by attn_heads");
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must cover the four special tokens");
        }
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        if self.medusa_heads > 0 && self.medusa_hidden == 0 {
            return bad("medusa_hidden must be positive when medusa heads are enabled");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}
