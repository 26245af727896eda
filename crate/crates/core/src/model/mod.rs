//! Decoder-only transformer: configuration, weights and the traced forward pass.

pub mod config;
pub mod engine;
pub mod trace;
pub mod weights;

pub use config::{Activation, HeadKind, Layout, ModelConfig};
pub use engine::{layer_norm, softmax_row, AttentionOutput, Transformer};
pub use trace::{ForwardTrace, TraceGauges};
pub use weights::{LayerWeights, LinearHead, NamedTensor, Norm, WeightStore};
