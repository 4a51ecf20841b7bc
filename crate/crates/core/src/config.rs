// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a decoder: depth, width, head layout, vocabulary and context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_rope_base() -> f64 {
    10000.0
}

impl ModelConfig {
    /// Config with `head_dim = model_dim / num_heads` and `ffn_dim = 2 * model_dim`.
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        model_dim: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        Self {
            num_layers,
            num_heads,
            model_dim,
            head_dim: model_dim.checked_div(num_heads).unwrap_or(0),
            ffn_dim: 2 * model_dim,
            vocab_size,
            max_seq_len,
            rope_base: default_rope_base(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Dimension(format!("{name} must be at least 1")));
            }
        }
        if self.num_heads * self.head_dim != self.model_dim {
            return Err(Error::Dimension(format!(
                "num_heads ({}) x head_dim ({}) != model_dim ({})",
                self.num_heads, self.head_dim, self.model_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::Dimension(format!(
                "head_dim {} must be even for rotary embedding",
                self.head_dim
            )));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(Error::Dimension(format!(
                "rope_base {} must be a finite value above 1",
                self.rope_base
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_head_dim() {
        let cfg = ModelConfig::new(2, 4, 32, 50, 64);
        assert_eq!(cfg.head_dim, 8);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_inconsistent_heads() {
        let mut cfg = ModelConfig::new(2, 4, 32, 50, 64);
        cfg.head_dim = 6;
        assert!(matches!(cfg.validate(), Err(Error::Dimension(_))));
    }

    #[test]
    fn rejects_small_rope_base() {
        let mut cfg = ModelConfig::new(1, 2, 8, 10, 16);
        cfg.rope_base = 1.0;
        assert!(cfg.validate().is_err());
    }
}
