use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual layout of a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// GPT-2 style: the MLP reads `x + a`.
    Serial,
    /// GPT-J style: MHSA and MLP both read `x`.
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Tanh approximation used by GPT-2.
    Gelu,
    Relu,
}

/// How the final hidden state is mapped to vocabulary logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Logits are `E · norm(x)`.
    TiedEmbedding,
    /// Logits are `W · norm(x) + u`.
    LinearHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub layout: Layout,
    pub activation: Activation,
    pub head_kind: HeadKind,
    pub norm_epsilon: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_inner", self.d_inner),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.norm_epsilon > 0.0 && self.norm_epsilon.is_finite()) {
            return Err(Error::Config("norm_epsilon must be a small positive number".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// A small GPT-2-shaped config used by tests and synthetic runs.
    pub fn tiny(n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_inner: 4 * d_model,
            vocab_size,
            max_positions: 64,
            layout: Layout::Serial,
            activation: Activation::Gelu,
            head_kind: HeadKind::TiedEmbedding,
            norm_epsilon: 1e-5,
        }
    }
}
