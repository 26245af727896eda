//! Okapi BM25 over a small in-memory paragraph corpus.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BM25_K1: f64 = 1.5;
pub const BM25_B: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub section_title: String,
    pub text: String,
}

impl Document {
    /// Title, section title and text, in that order. This is what gets indexed.
    fn indexed_text(&self) -> String {
        format!("{} {} {}", self.title, self.section_title, self.text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredDoc {
    /// Index into [`Corpus::documents`].
    pub index: usize,
    pub doc_id: String,
    pub score: f64,
}

/// Lowercased whitespace tokens with surrounding punctuation trimmed.
pub fn retrieval_terms(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Clone, Debug)]
pub struct Corpus {
    documents: Vec<Document>,
    postings: HashMap<String, Vec<(usize, u32)>>,
    doc_lengths: Vec<usize>,
    avg_doc_length: f64,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Self {
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_lengths = Vec::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            let terms = retrieval_terms(&doc.indexed_text());
            doc_lengths.push(terms.len());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (t, count) in tf {
                postings.entry(t).or_default().push((i, count));
            }
        }
        for list in postings.values_mut() {
            list.sort_unstable();
        }
        let total: usize = doc_lengths.iter().sum();
        let avg_doc_length = if documents.is_empty() { 0.0 } else { total as f64 / documents.len() as f64 };
        Self { documents, postings, doc_lengths, avg_doc_length }
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn doc_length(&self, index: usize) -> usize {
        self.doc_lengths[index]
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// `ln((N − df + 0.5) / (df + 0.5) + 1)`, which stays positive for common terms.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.documents.len() as f64;
        let df = self.document_frequency(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }
}

/// Orders ids numerically when both are integers, otherwise lexically.
fn compare_doc_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

/// Top `top_n` documents by BM25 score. Documents sharing no term with the
/// query are never returned. Repeated query terms count once.
pub fn bm25_rank(query_terms: &[String], corpus: &Corpus, top_n: usize) -> Result<Vec<ScoredDoc>> {
    if query_terms.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let mut seen = Vec::new();
    for t in query_terms {
        if !seen.contains(t) {
            seen.push(t.clone());
        }
    }
    let mut scores: HashMap<usize, f64> = HashMap::new();
    for term in &seen {
        let Some(list) = corpus.postings.get(term) else { continue };
        let idf = corpus.idf(term);
        for &(doc, tf) in list {
            let tf = tf as f64;
            let len_norm = 1.0 - BM25_B + BM25_B * corpus.doc_lengths[doc] as f64 / corpus.avg_doc_length;
            *scores.entry(doc).or_default() += idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * len_norm);
        }
    }
    let mut ranked: Vec<ScoredDoc> = scores
        .into_iter()
        .map(|(index, score)| ScoredDoc { index, doc_id: corpus.documents[index].doc_id.clone(), score })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| compare_doc_ids(&a.doc_id, &b.doc_id))
            .then(a.index.cmp(&b.index))
    });
    ranked.truncate(top_n);
    Ok(ranked)
}
