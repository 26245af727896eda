use crate::interventions::{InterventionPlan, SublayerKind};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Which optional parts of a forward pass to keep.
///
/// Residual states and sublayer updates are always recorded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceGauges {
    pub attention_weights: bool,
    pub head_contributions: bool,
    pub mlp_inputs: bool,
}

impl TraceGauges {
    pub const FULL: TraceGauges = TraceGauges { attention_weights: true, head_contributions: true, mlp_inputs: true };
    pub const MINIMAL: TraceGauges =
        TraceGauges { attention_weights: false, head_contributions: false, mlp_inputs: false };
}

impl Default for TraceGauges {
    fn default() -> Self {
        Self::FULL
    }
}

/// Everything computed by one forward pass.
///
/// Layer-indexed accessors take 1-based layers; `residual(0)` is the
/// embedding sum.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub tokens: Vec<u32>,
    pub plan: InterventionPlan,
    pub gauges: TraceGauges,
    /// `L + 1` matrices of shape `N × d`.
    pub residuals: Vec<Matrix<T>>,
    pub attn_updates: Vec<Matrix<T>>,
    pub mlp_updates: Vec<Matrix<T>>,
    /// `[layer - 1][head]`, each `N × N`. Empty unless gauged.
    pub attention_weights: Vec<Vec<Matrix<T>>>,
    /// `[layer - 1][head]`, each `N × d`. Empty unless gauged.
    pub head_contributions: Vec<Vec<Matrix<T>>>,
    /// Normalized MLP inputs per layer, `N × d`. Empty unless gauged.
    pub mlp_inputs: Vec<Matrix<T>>,
    /// Next-token distribution at the last position.
    pub final_distribution: Vec<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_layers(&self) -> usize {
        self.attn_updates.len()
    }

    pub fn last_position(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn residual(&self, layer: usize) -> &Matrix<T> {
        &self.residuals[layer]
    }

    pub fn attn_update(&self, layer: usize) -> &Matrix<T> {
        &self.attn_updates[layer - 1]
    }

    pub fn mlp_update(&self, layer: usize) -> &Matrix<T> {
        &self.mlp_updates[layer - 1]
    }

    pub fn update(&self, kind: SublayerKind, layer: usize) -> &Matrix<T> {
        match kind {
            SublayerKind::Mhsa => self.attn_update(layer),
            SublayerKind::Mlp => self.mlp_update(layer),
        }
    }

    pub fn attention(&self, layer: usize, head: usize) -> Option<&Matrix<T>> {
        self.attention_weights.get(layer - 1).and_then(|h| h.get(head))
    }

    pub fn mlp_input(&self, layer: usize) -> Option<&Matrix<T>> {
        self.mlp_inputs.get(layer - 1)
    }

    pub fn final_hidden(&self) -> &[T] {
        self.residuals[self.n_layers()].row(self.last_position())
    }

    /// Probability of `token` at the last position.
    pub fn prob(&self, token: u32) -> T {
        self.final_distribution[token as usize]
    }

    /// Greedy next token with lowest-id tie-break.
    pub fn predicted_token(&self) -> u32 {
        crate::scalar::argmax(&self.final_distribution) as u32
    }
}
