//! Vocabulary-space inspection of hidden states, sublayer updates and head
//! parameters.
//!
//! Two projections are in play and each operation names the one it uses:
//! [`Projection::Head`] is the model's prediction head (final norm then
//! unembedding) and [`Projection::Embedding`] multiplies by `E` alone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::SublayerKind;
use crate::model::{ForwardTrace, Transformer};
use crate::scalar::{argmax, rank_of, top_k_indices, Scalar};
use crate::tokenizer::Tokenizer;

/// Default top-k for attribute-rate projections.
pub const DEFAULT_TOP_K: usize = 50;
/// Default number of MLP sub-updates kept per decomposition.
pub const DEFAULT_TOP_SUBUPDATES: usize = 100;
/// Top-k used when checking head subject-to-attribute mappings.
pub const HEAD_MAPPING_TOP_K: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// Final norm followed by the prediction head.
    Head,
    /// `E · v` without normalization.
    Embedding,
    /// Final norm followed by `E`; the alternative reading for update projections.
    NormedEmbedding,
}

impl Projection {
    pub fn logits<T: Scalar>(self, model: &Transformer<T>, v: &[T]) -> Vec<T> {
        match self {
            Projection::Head => model.logits(v),
            Projection::Embedding => model.embedding_projection(v),
            Projection::NormedEmbedding => {
                let h = crate::model::layer_norm(v, &model.weights.final_norm, T::lit(model.config.norm_epsilon));
                model.embedding_projection(&h)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub id: u32,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabProjection {
    pub layer: Option<usize>,
    pub position: Option<usize>,
    /// Best first; ties broken by lowest id.
    pub top_tokens: Vec<TokenScore>,
    /// 1-based ranks of selected tokens over the full vocabulary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_rank_of: Option<BTreeMap<u32, usize>>,
}

impl VocabProjection {
    pub fn ids(&self) -> Vec<u32> {
        self.top_tokens.iter().map(|t| t.id).collect()
    }

    pub fn at(mut self, layer: usize, position: usize) -> Self {
        self.layer = Some(layer);
        self.position = Some(position);
        self
    }

    pub fn to_record(&self, kind: &str, tokenizer: &Tokenizer) -> LensRecord {
        LensRecord {
            layer: self.layer,
            position: self.position,
            kind: kind.to_string(),
            tokens: self
                .top_tokens
                .iter()
                .map(|t| RecordToken { id: t.id, string: tokenizer.token_string(t.id), score: t.score })
                .collect(),
        }
    }
}

/// Serialized form of a projection or event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensRecord {
    pub layer: Option<usize>,
    pub position: Option<usize>,
    pub kind: String,
    pub tokens: Vec<RecordToken>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordToken {
    pub id: u32,
    pub string: String,
    pub score: f64,
}

fn top_scores<T: Scalar>(logits: &[T], k: usize) -> Vec<TokenScore> {
    top_k_indices(logits, k)
        .into_iter()
        .map(|i| TokenScore { id: i as u32, score: logits[i].as_f64() })
        .collect()
}

/// Top-k tokens of `δ(hidden)`. Logit order equals probability order.
pub fn project_to_vocab<T: Scalar>(model: &Transformer<T>, hidden: &[T], top_k: usize) -> VocabProjection {
    project_with(model, hidden, top_k, Projection::Head)
}

pub fn project_with<T: Scalar>(model: &Transformer<T>, v: &[T], top_k: usize, projection: Projection) -> VocabProjection {
    let logits = projection.logits(model, v);
    VocabProjection { layer: None, position: None, top_tokens: top_scores(&logits, top_k), full_rank_of: None }
}

/// Like [`project_to_vocab`], also reporting full-vocabulary ranks of `tracked`.
pub fn project_with_ranks<T: Scalar>(
    model: &Transformer<T>,
    hidden: &[T],
    top_k: usize,
    tracked: &[u32],
) -> VocabProjection {
    let logits = model.logits(hidden);
    let ranks = tracked.iter().map(|&t| (t, rank_of(&logits, t as usize))).collect();
    VocabProjection { layer: None, position: None, top_tokens: top_scores(&logits, top_k), full_rank_of: Some(ranks) }
}

/// Agreement between the final prediction and the top token of one update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionEvent {
    pub layer: usize,
    pub kind: SublayerKind,
    /// Final prediction `argmax p_N^L`.
    pub t_star: u32,
    /// Top token of the update at the last position.
    pub t_prime: u32,
    pub matched: bool,
}

/// Compares `argmax(E · update_N)` against the model prediction.
///
/// The update is projected by the embedding matrix alone.
pub fn detect_extraction<T: Scalar>(
    model: &Transformer<T>,
    trace: &ForwardTrace<T>,
    layer: usize,
    kind: SublayerKind,
) -> ExtractionEvent {
    detect_extraction_with(model, trace, layer, kind, Projection::Embedding)
}

pub fn detect_extraction_with<T: Scalar>(
    model: &Transformer<T>,
    trace: &ForwardTrace<T>,
    layer: usize,
    kind: SublayerKind,
    projection: Projection,
) -> ExtractionEvent {
    let update = trace.update(kind, layer).row(trace.last_position());
    let t_prime = argmax(&projection.logits(model, update)) as u32;
    let t_star = trace.predicted_token();
    ExtractionEvent { layer, kind, t_star, t_prime, matched: t_star == t_prime }
}

/// 1-based rank of `attribute_token` in `δ(hidden)`.
pub fn attribute_rank<T: Scalar>(model: &Transformer<T>, hidden: &[T], attribute_token: u32) -> usize {
    rank_of(&model.logits(hidden), attribute_token as usize)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMappingRow {
    pub layer: usize,
    pub head: usize,
    pub source_token: u32,
    pub top_tokens: Vec<TokenScore>,
}

/// Row `source_token` of `E W_V^{l,j} W_O^{l,j} Eᵀ`, evaluated as two
/// vector-matrix products and one unembedding.
pub fn head_mapping_scores<T: Scalar>(model: &Transformer<T>, layer: usize, head: usize, source_token: u32) -> Result<Vec<T>> {
    check_head(model, layer, head, source_token)?;
    let hd = model.config.head_dim();
    let w = &model.weights.layers[layer - 1];
    let e_t = model.weights.embedding.row(source_token as usize);
    let through_v = w.w_v_head(head, hd).vecmat(e_t);
    let through_o = w.w_o_head(head, hd).vecmat(&through_v);
    Ok(model.embedding_projection(&through_o))
}

pub fn head_mapping<T: Scalar>(
    model: &Transformer<T>,
    layer: usize,
    head: usize,
    source_token: u32,
    top_k: usize,
) -> Result<HeadMappingRow> {
    let scores = head_mapping_scores(model, layer, head, source_token)?;
    Ok(HeadMappingRow { layer, head, source_token, top_tokens: top_scores(&scores, top_k) })
}

fn check_head<T: Scalar>(model: &Transformer<T>, layer: usize, head: usize, token: u32) -> Result<()> {
    let c = &model.config;
    if !(1..=c.n_layers).contains(&layer) || head >= c.n_heads || token as usize >= c.vocab_size {
        return Err(Error::PlanOutOfRange(format!("head ({layer}, {head}) or token {token} out of range")));
    }
    Ok(())
}

/// One term `coefficient · w_F^{(l,j)}` of an MLP update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubUpdate<T> {
    pub layer: usize,
    pub index: usize,
    pub coefficient: T,
    pub direction: Vec<T>,
    /// `|coefficient| · ‖direction‖`, the ordering key.
    pub contribution: T,
    /// Top tokens of `E · direction`.
    pub top_tokens: Vec<TokenScore>,
}

/// Splits the MLP update at (`layer`, `position`) into its `d_inner` terms
/// and returns the `top_m` largest by contribution magnitude.
pub fn mlp_subupdate_decomposition<T: Scalar>(
    model: &Transformer<T>,
    trace: &ForwardTrace<T>,
    layer: usize,
    position: usize,
    top_m: usize,
    tokens_per_subupdate: usize,
) -> Result<Vec<SubUpdate<T>>> {
    let input = trace.mlp_input(layer).ok_or(Error::MissingGauge("MLP inputs"))?;
    if position >= input.rows() {
        return Err(Error::PlanOutOfRange(format!("position {position} outside trace")));
    }
    let coefficients = model.mlp_coefficients(layer, input.row(position));
    let w_out = &model.weights.layers[layer - 1].w_out;
    let w_out_t = w_out.transpose();
    let contributions: Vec<T> = coefficients
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let col = w_out_t.row(j);
            c.abs() * crate::tensor::dot(col, col).sqrt()
        })
        .collect();
    Ok(top_k_indices(&contributions, top_m)
        .into_iter()
        .map(|j| {
            let direction = w_out_t.row(j).to_vec();
            let top_tokens = top_scores(&model.embedding_projection(&direction), tokens_per_subupdate);
            SubUpdate { layer, index: j, coefficient: coefficients[j], direction, contribution: contributions[j], top_tokens }
        })
        .collect())
}
