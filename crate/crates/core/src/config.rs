//! Architecture description read from the JSON sidecar next to an archive.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalScheme {
    /// Learned absolute position embeddings (`pos_embed.W_pos`).
    Learned,
    /// Per-head linear distance penalties on attention scores.
    Alibi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationFn {
    GeluTanh,
    GeluExact,
}

impl Default for ActivationFn {
    fn default() -> Self {
        ActivationFn::GeluTanh
    }
}

/// Shape and numerical conventions of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub positional_scheme: PositionalScheme,
    #[serde(default)]
    pub activation_fn: ActivationFn,
    pub layernorm_epsilon: f32,
    pub tie_unembedding: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::InvalidConfig(format!(
                "d_model ({}) != n_heads ({}) * d_head ({})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !(self.layernorm_epsilon > 0.0) || !self.layernorm_epsilon.is_finite() {
            return Err(Error::InvalidConfig(
                "layernorm_epsilon must be a finite positive number".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 16,
            d_head: 4,
            d_mlp: 32,
            vocab_size: 50,
            max_seq_len: 32,
            positional_scheme: PositionalScheme::Learned,
            activation_fn: ActivationFn::GeluTanh,
            layernorm_epsilon: 1e-5,
            tie_unembedding: false,
        }
    }

    #[test]
    fn head_dims_must_multiply_out() {
        let mut c = tiny();
        c.d_head = 5;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn zero_counts_and_bad_epsilon_rejected() {
        let mut c = tiny();
        c.n_layers = 0;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.layernorm_epsilon = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_uses_snake_case_enums() {
        let mut c = tiny();
        c.positional_scheme = PositionalScheme::Alibi;
        c.activation_fn = ActivationFn::GeluExact;
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"alibi\"") && s.contains("\"gelu_exact\""));
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
