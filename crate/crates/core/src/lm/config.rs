use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CONTEXT_LEN: usize = 1024;

/// Shape of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    #[serde(default = "default_context_len")]
    pub context_len: usize,
    /// Feed-forward width is `ff_mult * d_model`.
    pub ff_mult: usize,
    #[serde(default = "default_tied")]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_context_len() -> usize {
    DEFAULT_CONTEXT_LEN
}

fn default_tied() -> bool {
    true
}

impl ModelConfig {
    pub fn new(vocab_size: usize, d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            context_len: DEFAULT_CONTEXT_LEN,
            ff_mult: 4,
            tie_embeddings: true,
            seed: 0,
        }
    }

    pub fn with_context_len(mut self, context_len: usize) -> Self {
        self.context_len = context_len;
        self
    }

    pub fn with_ff_mult(mut self, ff_mult: usize) -> Self {
        self.ff_mult = ff_mult;
        self
    }

    pub fn with_tied(mut self, tied: bool) -> Self {
        self.tie_embeddings = tied;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        self.ff_mult * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ff_mult == 0 {
            return bad("d_model, n_layers, n_heads and ff_mult must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        // rotary encoding rotates pairs of channels
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dimension {} must be even", self.head_dim()));
        }
        if self.context_len == 0 {
            return bad("context_len must be at least 1".into());
        }
        Ok(())
    }

    /// Closed-form parameter count over the tensor inventory:
    ///
    /// ```text
    /// embedding           V·d
    /// per layer           2·d (norm gains) + 4·d² (q, k, v, o) + 2·d·F (up, down)
    /// final norm          d
    /// untied output head  V·d
    /// ```
    pub fn count_params(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.ff_dim());
        let per_layer = 2 * d + 4 * d * d + 2 * d * f;
        let head = if self.tie_embeddings { 0 } else { v * d };
        v * d + self.n_layers * per_layer + d + head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig::new(16, 10, 1, 3);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_odd_head_dim() {
        let cfg = ModelConfig::new(16, 6, 1, 2);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tying_saves_one_vocab_matrix() {
        let tied = ModelConfig::new(16, 8, 1, 2);
        let untied = tied.clone().with_tied(false);
        assert_eq!(untied.count_params() - tied.count_params(), 16 * 8);
    }
}
