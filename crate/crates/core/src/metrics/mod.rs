//! Corpus retrieval, candidate attribute sets and aggregate statistics.

pub mod bm25;
pub mod candidates;
pub mod stats;

pub use bm25::{bm25_rank, retrieval_terms, Corpus, Document, ScoredDoc, BM25_B, BM25_K1};
pub use candidates::{build_candidate_set, CandidateAttributeSet, CandidateCache, Stopwords};
pub use stats::{
    aggregate_extraction_stats, attributes_rate, embedding_attribute_rate, relative_prob_change, EmbeddingAttributeRate,
    ExtractionStats, MeanAccumulator,
};
