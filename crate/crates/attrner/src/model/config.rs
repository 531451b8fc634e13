//! Encoder configuration.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid model config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub n_tokens: usize,
    pub n_pos: usize,
    pub n_labels: usize,
    pub n_tags: usize,
}

impl ModelConfig {
    /// Desk-scale default, oracle-verifiable in seconds.
    pub fn desk(n_tokens: usize, n_pos: usize, n_labels: usize, n_tags: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            max_len: 64,
            dropout_rate: 0.0,
            n_tokens,
            n_pos,
            n_labels: n_labels.max(1),
            n_tags,
        }
    }

    /// Full-scale reference preset (12 heads, 768-wide); not used by the
    /// verification suites.
    pub fn paper_scale(n_tokens: usize, n_pos: usize, n_labels: usize, n_tags: usize) -> Self {
        ModelConfig {
            d_model: 768,
            n_heads: 12,
            n_layers: 12,
            d_ff: 3072,
            max_len: 512,
            dropout_rate: 0.1,
            n_tokens,
            n_pos,
            n_labels: n_labels.max(1),
            n_tags,
        }
    }

    /// Tiny configuration for finite-difference gradient checking.
    pub fn tiny(n_tokens: usize, n_pos: usize, n_labels: usize, n_tags: usize) -> Self {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            max_len: 8,
            dropout_rate: 0.0,
            n_tokens,
            n_pos,
            n_labels: n_labels.max(1),
            n_tags,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d_model == 0
            || self.n_heads == 0
            || self.n_layers == 0
            || self.d_ff == 0
            || self.max_len == 0
            || self.n_tokens == 0
            || self.n_pos == 0
            || self.n_labels == 0
            || self.n_tags == 0
        {
            return Err(ConfigError::Invalid("all sizes must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ConfigError::Invalid(format!(
                "dropout_rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}
