//! Rates, relative changes and extraction statistics.

use serde::{Deserialize, Serialize};

use super::candidates::CandidateAttributeSet;
use crate::error::{Error, Result};
use crate::lens::{project_to_vocab, ExtractionEvent};
use crate::model::Transformer;
use crate::scalar::Scalar;

/// Fraction of `tokens` (with multiplicity) contained in `a_s`. `None` when
/// the candidate set is empty, since the rate is then undefined.
pub fn attributes_rate(tokens: &[u32], a_s: &CandidateAttributeSet) -> Result<Option<f64>> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("token list"));
    }
    if a_s.is_empty() {
        return Ok(None);
    }
    let hits = tokens.iter().filter(|&&t| a_s.contains(t)).count();
    Ok(Some(hits as f64 / tokens.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingAttributeRate {
    pub per_token_max: Option<f64>,
    pub mean_vector_rate: Option<f64>,
}

/// Attribute rates of the top-k projections of each subject token embedding
/// and of their mean `ē`.
pub fn embedding_attribute_rate<T: Scalar>(
    model: &Transformer<T>,
    subject_tokens: &[u32],
    a_s: &CandidateAttributeSet,
    top_k: usize,
) -> Result<EmbeddingAttributeRate> {
    if subject_tokens.is_empty() {
        return Err(Error::EmptyInput("subject tokens"));
    }
    let d = model.config.d_model;
    let mut mean = vec![T::zero(); d];
    let mut per_token_max: Option<f64> = None;
    for &t in subject_tokens {
        if t as usize >= model.config.vocab_size {
            return Err(Error::PlanOutOfRange(format!("token {t} outside vocabulary")));
        }
        let e = model.weights.embedding.row(t as usize);
        for (m, &v) in mean.iter_mut().zip(e) {
            *m += v;
        }
        let rate = attributes_rate(&project_to_vocab(model, e, top_k).ids(), a_s)?;
        per_token_max = match (per_token_max, rate) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
    }
    let n = T::lit(subject_tokens.len() as f64);
    mean.iter_mut().for_each(|m| *m /= n);
    let mean_vector_rate = attributes_rate(&project_to_vocab(model, &mean, top_k).ids(), a_s)?;
    Ok(EmbeddingAttributeRate { per_token_max, mean_vector_rate })
}

/// `(intervened − base) / base`.
pub fn relative_prob_change(base_p: f64, intervened_p: f64) -> Result<f64> {
    if base_p <= 0.0 {
        return Err(Error::ZeroBaseProbability);
    }
    Ok((intervened_p - base_p) / base_p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionStats {
    pub n_queries: usize,
    /// Fraction of queries with at least one matched layer.
    pub extraction_rate: f64,
    pub mean_extracting_layers: f64,
    /// Entry `i` is the fraction of queries matched at layer `i + 1`.
    pub per_layer_rates: Vec<f64>,
}

/// Aggregates one grid per query, each holding one event per layer in order.
pub fn aggregate_extraction_stats(grids: &[Vec<ExtractionEvent>]) -> Result<ExtractionStats> {
    let first = grids.first().ok_or(Error::EmptyInput("extraction grids"))?;
    let n_layers = first.len();
    let mut per_layer = vec![0usize; n_layers];
    let mut any = 0usize;
    let mut total_matched = 0usize;
    for (q, grid) in grids.iter().enumerate() {
        if grid.len() != n_layers {
            return Err(Error::Shape(format!("grid {q} has {} layers, expected {n_layers}", grid.len())));
        }
        let mut count = 0;
        for (i, ev) in grid.iter().enumerate() {
            if ev.matched {
                per_layer[i] += 1;
                count += 1;
            }
        }
        total_matched += count;
        any += usize::from(count > 0);
    }
    let n = grids.len() as f64;
    Ok(ExtractionStats {
        n_queries: grids.len(),
        extraction_rate: any as f64 / n,
        mean_extracting_layers: total_matched as f64 / n,
        per_layer_rates: per_layer.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// Running mean with a sample count. Empty accumulators report no mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanAccumulator {
    pub sum: f64,
    pub count: usize,
}

impl MeanAccumulator {
    pub fn push(&mut self, value: f64) {
        self.sum += value;
        self.count += 1;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interventions::SublayerKind;
    use std::collections::BTreeSet;

    fn set(ids: &[u32]) -> CandidateAttributeSet {
        CandidateAttributeSet { subject: "s".into(), tokens: ids.iter().copied().collect::<BTreeSet<_>>(), retained_paragraphs: 1 }
    }

    fn grid(matched: &[bool]) -> Vec<ExtractionEvent> {
        matched
            .iter()
            .enumerate()
            .map(|(i, &m)| ExtractionEvent { layer: i + 1, kind: SublayerKind::Mhsa, t_star: 0, t_prime: u32::from(!m), matched: m })
            .collect()
    }

    #[test]
    fn rate_examples() {
        assert_eq!(attributes_rate(&[1, 2, 3, 4], &set(&[2, 4, 9])).unwrap(), Some(0.5));
        assert_eq!(attributes_rate(&[2, 4], &set(&[2, 4, 9])).unwrap(), Some(1.0));
        assert_eq!(attributes_rate(&[2], &set(&[])).unwrap(), None);
        assert!(attributes_rate(&[], &set(&[1])).is_err());
    }

    #[test]
    fn relative_change_examples() {
        assert!((relative_prob_change(0.8, 0.2).unwrap() + 0.75).abs() < 1e-12);
        assert_eq!(relative_prob_change(0.3, 0.3).unwrap(), 0.0);
        assert!((relative_prob_change(0.4, 0.5).unwrap() - 0.25).abs() < 1e-12);
        assert!(matches!(relative_prob_change(0.0, 0.1), Err(Error::ZeroBaseProbability)));
    }

    #[test]
    fn extraction_examples() {
        let stats = aggregate_extraction_stats(&[
            grid(&[true, false, true]),
            grid(&[false, false, false]),
            grid(&[false, true, false]),
        ])
        .unwrap();
        assert!((stats.extraction_rate - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(stats.mean_extracting_layers, 1.0);
        let none = aggregate_extraction_stats(&[grid(&[false; 4]), grid(&[false; 4])]).unwrap();
        assert_eq!((none.extraction_rate, none.mean_extracting_layers), (0.0, 0.0));
        assert!(aggregate_extraction_stats(&[]).is_err());
        assert!(aggregate_extraction_stats(&[grid(&[true]), grid(&[true, false])]).is_err());
    }
}
