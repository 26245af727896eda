//! Deterministic decoder-only transformer inference with full trace capture
//! and a toolkit of causal interventions for studying factual recall:
//! attention knockout, sublayer knockout, representation patching,
//! vocabulary projection, head OV mappings and gradient attribution.
//!
//! The math is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the two concrete instantiations.

pub mod attribution;
pub mod error;
pub mod experiments;
pub mod interventions;
pub mod io;
pub mod lens;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use interventions::{InterventionPlan, KnockoutWindow, SublayerKind};
pub use model::{ForwardTrace, ModelConfig, TraceGauges, Transformer, WeightStore};
pub use scalar::Scalar;
pub use tensor::Matrix;
pub use tokenizer::{tokenize_query, TokenizedQuery, Tokenizer};

pub type Transformer32 = Transformer<f32>;
pub type Transformer64 = Transformer<f64>;
pub type Trace32 = ForwardTrace<f32>;
pub type Trace64 = ForwardTrace<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
