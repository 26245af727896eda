//! Declarative intervention plans.
//!
//! Layers are 1-based (`1..=L`, with `0` naming the embeddings where a source
//! layer is expected); positions are 0-based token indices.
//!
//! Order of application inside one MHSA sublayer at layer `l`:
//! 1. patched positions expose `x^{src}` as their key/value input,
//! 2. the causal mask is edited with every block declared for `l`,
//! 3. attention is computed and the update written,
//! 4. declared zeroings overwrite the update with zeros.

use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SublayerKind {
    Mhsa,
    Mlp,
}

impl SublayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SublayerKind::Mhsa => "mhsa",
            SublayerKind::Mlp => "mlp",
        }
    }
}

/// Blocks `query` from attending to `key` in the MHSA of `layer`, all heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub layer: usize,
    pub query: usize,
    pub key: usize,
}

/// Forces the `kind` update at (`layer`, `position`) to zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SublayerZeroing {
    pub kind: SublayerKind,
    pub layer: usize,
    pub position: usize,
}

/// Every MHSA at a layer above `source_layer` reads `x^{source_layer}` at `position`
/// as key/value input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Patch {
    pub position: usize,
    pub source_layer: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionPlan {
    #[serde(default)]
    pub attention_blocks: BTreeSet<AttentionBlock>,
    #[serde(default)]
    pub sublayer_zeroings: BTreeSet<SublayerZeroing>,
    #[serde(default)]
    pub patches: BTreeSet<Patch>,
    /// Knockout window width `k` this plan was built from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_size: Option<usize>,
}

impl InterventionPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.attention_blocks.is_empty() && self.sublayer_zeroings.is_empty() && self.patches.is_empty()
    }

    pub fn block(&mut self, layer: usize, query: usize, key: usize) -> Result<&mut Self> {
        if key > query {
            return Err(Error::InvalidPlan(format!(
                "block at layer {layer} references future position {key} from {query}"
            )));
        }
        self.attention_blocks.insert(AttentionBlock { layer, query, key });
        Ok(self)
    }

    pub fn zero(&mut self, kind: SublayerKind, layer: usize, position: usize) -> &mut Self {
        self.sublayer_zeroings.insert(SublayerZeroing { kind, layer, position });
        self
    }

    pub fn patch(&mut self, position: usize, source_layer: usize) -> &mut Self {
        self.patches.insert(Patch { position, source_layer });
        self
    }

    /// Union of two plans. The window size is kept when both agree.
    pub fn merge(mut self, other: &InterventionPlan) -> Self {
        self.attention_blocks.extend(other.attention_blocks.iter().copied());
        self.sublayer_zeroings.extend(other.sublayer_zeroings.iter().copied());
        self.patches.extend(other.patches.iter().copied());
        self.window_size = match (self.window_size, other.window_size) {
            (Some(a), Some(b)) if a == b => Some(a),
            (Some(a), None) | (None, Some(a)) => Some(a),
            _ => None,
        };
        self
    }

    /// Checks every reference against the model depth and the token count.
    pub fn validate(&self, config: &ModelConfig, n_tokens: usize) -> Result<()> {
        let l = config.n_layers;
        let layer_ok = |layer: usize| (1..=l).contains(&layer);
        for b in &self.attention_blocks {
            if !layer_ok(b.layer) {
                return Err(Error::PlanOutOfRange(format!("attention block layer {} not in 1..={l}", b.layer)));
            }
            if b.query >= n_tokens || b.key >= n_tokens {
                return Err(Error::PlanOutOfRange(format!(
                    "attention block ({}, {}) outside {n_tokens} positions",
                    b.query, b.key
                )));
            }
            if b.key > b.query {
                return Err(Error::InvalidPlan(format!(
                    "block at layer {} references future position {} from {}",
                    b.layer, b.key, b.query
                )));
            }
        }
        for z in &self.sublayer_zeroings {
            if !layer_ok(z.layer) {
                return Err(Error::PlanOutOfRange(format!("zeroing layer {} not in 1..={l}", z.layer)));
            }
            if z.position >= n_tokens {
                return Err(Error::PlanOutOfRange(format!("zeroing position {} outside {n_tokens} positions", z.position)));
            }
        }
        let mut seen = BTreeSet::new();
        for p in &self.patches {
            if p.source_layer >= l {
                return Err(Error::PlanOutOfRange(format!("patch source layer {} not in 0..{l}", p.source_layer)));
            }
            if p.position >= n_tokens {
                return Err(Error::PlanOutOfRange(format!("patch position {} outside {n_tokens} positions", p.position)));
            }
            if !seen.insert(p.position) {
                return Err(Error::InvalidPlan(format!("position {} is patched from two layers", p.position)));
            }
        }
        Ok(())
    }

    pub fn blocks_at(&self, layer: usize) -> impl Iterator<Item = &AttentionBlock> {
        self.attention_blocks.iter().filter(move |b| b.layer == layer)
    }

    pub fn is_zeroed(&self, kind: SublayerKind, layer: usize, position: usize) -> bool {
        self.sublayer_zeroings.contains(&SublayerZeroing { kind, layer, position })
    }

    /// Source layer to read at `position` for the MHSA of `layer`, if patched.
    pub fn patch_source(&self, layer: usize, position: usize) -> Option<usize> {
        self.patches
            .iter()
            .find(|p| p.position == position && p.source_layer < layer)
            .map(|p| p.source_layer)
    }

    pub fn has_patches(&self) -> bool {
        !self.patches.is_empty()
    }
}

/// Attention knockout from a set of source positions into one target position
/// over a window of layers centred on `center_layer`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnockoutWindow {
    pub center_layer: usize,
    /// Window width `k`; must be odd.
    pub width: usize,
    /// Positions the target is prevented from reading.
    pub source_positions: Vec<usize>,
    /// The attending position, usually the last token.
    pub target_position: usize,
}

/// Layers `[max(1, c - k/2), min(L, c + k/2)]`.
pub fn window_layers(center_layer: usize, width: usize, n_layers: usize) -> RangeInclusive<usize> {
    let half = width / 2;
    center_layer.saturating_sub(half).max(1)..=(center_layer + half).min(n_layers)
}

pub fn knockout_window(window: &KnockoutWindow, config: &ModelConfig) -> Result<InterventionPlan> {
    if window.width == 0 || window.width % 2 == 0 {
        return Err(Error::InvalidPlan(format!("window width {} must be odd and positive", window.width)));
    }
    if !(1..=config.n_layers).contains(&window.center_layer) {
        return Err(Error::PlanOutOfRange(format!(
            "window center {} not in 1..={}",
            window.center_layer, config.n_layers
        )));
    }
    if let Some(&bad) = window.source_positions.iter().find(|&&s| s > window.target_position) {
        return Err(Error::InvalidPlan(format!(
            "source position {bad} lies after target position {}",
            window.target_position
        )));
    }
    let mut plan = InterventionPlan { window_size: Some(window.width), ..Default::default() };
    for layer in window_layers(window.center_layer, window.width, config.n_layers) {
        for &source in &window.source_positions {
            plan.block(layer, window.target_position, source)?;
        }
    }
    Ok(plan)
}

/// Number of consecutive layers cancelled by a sublayer knockout.
pub const SUBLAYER_KNOCKOUT_SPAN: usize = 10;

/// Zeroes the `kind` update at `position` for layers `start..=min(start + 9, L)`.
pub fn sublayer_knockout(
    kind: SublayerKind,
    start_layer: usize,
    position: usize,
    config: &ModelConfig,
) -> Result<InterventionPlan> {
    if !(1..=config.n_layers).contains(&start_layer) {
        return Err(Error::PlanOutOfRange(format!("start layer {start_layer} not in 1..={}", config.n_layers)));
    }
    let end = (start_layer + SUBLAYER_KNOCKOUT_SPAN - 1).min(config.n_layers);
    let mut plan = InterventionPlan::new();
    for layer in start_layer..=end {
        plan.zero(kind, layer, position);
    }
    Ok(plan)
}

/// Freezes what later MHSA sublayers read at `positions` to `x^{source_layer}`.
pub fn patch_positions(positions: &[usize], source_layer: usize, config: &ModelConfig) -> Result<InterventionPlan> {
    if source_layer >= config.n_layers {
        return Err(Error::PlanOutOfRange(format!(
            "patch source layer {source_layer} not in 0..{}",
            config.n_layers
        )));
    }
    let mut plan = InterventionPlan::new();
    for &p in positions {
        plan.patch(p, source_layer);
    }
    Ok(plan)
}

/// Standard causal mask: `0` on and below the diagonal, `-inf` above.
pub fn causal_mask<T: Scalar>(n: usize) -> Matrix<T> {
    Matrix::from_fn(n, n, |r, c| if c > r { T::neg_infinity() } else { T::zero() })
}

/// Applies every block declared for `layer` to a copy of `base_mask`.
pub fn apply_plan_to_mask<T: Scalar>(base_mask: &Matrix<T>, plan: &InterventionPlan, layer: usize) -> Matrix<T> {
    let mut mask = base_mask.clone();
    for b in plan.blocks_at(layer) {
        mask.set(b.query, b.key, T::neg_infinity());
    }
    mask
}

/// Plan builders for the information-flow experiment family.
pub mod presets {
    use super::*;
    use crate::tokenizer::TokenizedQuery;

    /// Window widths swept by the window-size experiment.
    pub const WINDOW_SWEEP: [usize; 6] = [1, 5, 9, 13, 17, 21];

    /// Source layers for early-layer patching (`0` is the embeddings).
    pub const PATCH_SOURCE_LAYERS: [usize; 5] = [0, 1, 5, 10, 20];

    /// Source sets blocked from the last position.
    #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
    #[serde(rename_all = "snake_case")]
    pub enum FlowCondition {
        Subject,
        Relation,
        Last,
    }

    impl FlowCondition {
        pub const ALL: [FlowCondition; 3] = [FlowCondition::Subject, FlowCondition::Relation, FlowCondition::Last];

        pub fn as_str(self) -> &'static str {
            match self {
                FlowCondition::Subject => "subject",
                FlowCondition::Relation => "relation",
                FlowCondition::Last => "last",
            }
        }

        pub fn sources(self, query: &TokenizedQuery) -> Vec<usize> {
            match self {
                FlowCondition::Subject => query.subject_positions.clone(),
                FlowCondition::Relation => query.relation_positions.clone(),
                FlowCondition::Last => vec![query.last_position()],
            }
        }
    }

    /// Drops position 0 from a source set, leaving the first-position edge open.
    pub fn exclude_first_position(sources: &[usize]) -> Vec<usize> {
        sources.iter().copied().filter(|&p| p != 0).collect()
    }

    /// Whether the subject opens the query (subject before relation).
    pub fn subject_first(query: &TokenizedQuery) -> bool {
        query.subject_positions.first() == Some(&0)
    }

    /// Subject position left unblocked in the per-subject-position variant.
    #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
    #[serde(rename_all = "snake_case")]
    pub enum KeptSubjectPosition {
        First,
        BeforeLast,
        Last,
    }

    impl KeptSubjectPosition {
        pub const ALL: [KeptSubjectPosition; 3] =
            [KeptSubjectPosition::First, KeptSubjectPosition::BeforeLast, KeptSubjectPosition::Last];

        pub fn as_str(self) -> &'static str {
            match self {
                KeptSubjectPosition::First => "first",
                KeptSubjectPosition::BeforeLast => "before_last",
                KeptSubjectPosition::Last => "last",
            }
        }
    }

    /// All subject positions but the kept one; `None` for single-token subjects.
    pub fn all_subject_but_one(query: &TokenizedQuery, kept: KeptSubjectPosition) -> Option<Vec<usize>> {
        let s = &query.subject_positions;
        if s.len() < 2 {
            return None;
        }
        let keep = match kept {
            KeptSubjectPosition::First => s[0],
            KeptSubjectPosition::BeforeLast => s[s.len() - 2],
            KeptSubjectPosition::Last => s[s.len() - 1],
        };
        Some(s.iter().copied().filter(|&p| p != keep).collect())
    }

    /// Knockout of `sources` into the last position around `center_layer`.
    pub fn flow_knockout(
        query: &TokenizedQuery,
        sources: &[usize],
        center_layer: usize,
        width: usize,
        config: &ModelConfig,
    ) -> Result<InterventionPlan> {
        knockout_window(
            &KnockoutWindow {
                center_layer,
                width,
                source_positions: sources.to_vec(),
                target_position: query.last_position(),
            },
            config,
        )
    }
}
