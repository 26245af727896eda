//! Candidate attribute sets: non-common tokens from paragraphs about a subject.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bm25::{bm25_rank, retrieval_terms, Corpus};
use crate::error::{Error, Result};
use crate::tokenizer::{Tokenizer, UNK_TOKEN};

pub const DEFAULT_RETRIEVED_PARAGRAPHS: usize = 100;
pub const MIN_TOKEN_CHARS: usize = 3;

const DEFAULT_STOPWORDS: &str = include_str!("../../data/stopwords_en.txt");

/// Lowercase stopword list, one word per line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stopwords(HashSet<String>);

impl Default for Stopwords {
    fn default() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }
}

impl Stopwords {
    pub fn parse(text: &str) -> Self {
        Self(text.lines().map(|l| l.trim().to_lowercase()).filter(|l| !l.is_empty()).collect())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(&word.to_lowercase())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateAttributeSet {
    pub subject: String,
    pub tokens: BTreeSet<u32>,
    /// Retrieved paragraphs that mention the subject verbatim.
    pub retained_paragraphs: usize,
}

impl CandidateAttributeSet {
    pub fn contains(&self, token: u32) -> bool {
        self.tokens.contains(&token)
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }
}

/// Whether a token string is kept: at least three non-space characters and
/// not a stopword once surrounding spaces are removed.
pub fn keeps_token(token_string: &str, stopwords: &Stopwords) -> bool {
    let core: String = token_string.chars().filter(|c| !c.is_whitespace()).collect();
    core.chars().count() >= MIN_TOKEN_CHARS && !stopwords.contains(&core) && core != UNK_TOKEN
}

pub fn build_candidate_set(
    subject: &str,
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    stopwords: &Stopwords,
    top_n: usize,
) -> Result<CandidateAttributeSet> {
    let retrieved = bm25_rank(&retrieval_terms(subject), corpus, top_n)?;
    let mut tokens = BTreeSet::new();
    let mut retained = 0;
    for hit in retrieved {
        let doc = &corpus.documents()[hit.index];
        if !(doc.text.contains(subject) || doc.title.contains(subject) || doc.section_title.contains(subject)) {
            continue;
        }
        retained += 1;
        for id in tokenizer.encode_lossy(&doc.text) {
            if !tokens.contains(&id) && keeps_token(&tokenizer.token_string(id), stopwords) {
                tokens.insert(id);
            }
        }
    }
    if retained == 0 {
        log::warn!("no retrieved paragraph mentions subject {subject:?}; attribute rates will be missing");
    }
    Ok(CandidateAttributeSet { subject: subject.to_string(), tokens, retained_paragraphs: retained })
}

/// Candidate sets keyed by subject, persisted as one JSON object.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CandidateCache(pub BTreeMap<String, CandidateAttributeSet>);

impl CandidateCache {
    pub fn get_or_build(
        &mut self,
        subject: &str,
        corpus: &Corpus,
        tokenizer: &Tokenizer,
        stopwords: &Stopwords,
        top_n: usize,
    ) -> Result<&CandidateAttributeSet> {
        if !self.0.contains_key(subject) {
            let set = build_candidate_set(subject, corpus, tokenizer, stopwords, top_n)?;
            self.0.insert(subject.to_string(), set);
        }
        Ok(&self.0[subject])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
