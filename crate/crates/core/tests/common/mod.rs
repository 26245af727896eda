//! Independent brute-force oracles and random instance generators shared by
//! the integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod checks;
pub mod engine;

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use tracelens::lens::ExtractionEvent;
use tracelens::metrics::{Document, Stopwords};
use tracelens::SublayerKind;

pub const STOP_SAMPLE: [&str; 6] = ["the", "and", "was", "for", "its", "of"];

/// BM25 recomputed from raw documents for every document, no index.
pub fn bm25_brute(query: &[&str], docs: &[Document]) -> Vec<(usize, f64)> {
    let tokenize = |d: &Document| -> Vec<String> {
        format!("{} {} {}", d.title, d.section_title, d.text)
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|w| !w.is_empty())
            .collect()
    };
    let bags: Vec<Vec<String>> = docs.iter().map(tokenize).collect();
    let n = docs.len() as f64;
    let avg = bags.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut unique: Vec<String> = Vec::new();
    for q in query {
        let q = q.to_lowercase();
        if !unique.contains(&q) {
            unique.push(q);
        }
    }
    let mut out = Vec::new();
    for (i, bag) in bags.iter().enumerate() {
        let mut score = 0.0;
        let mut overlap = false;
        for q in &unique {
            let tf = bag.iter().filter(|w| *w == q).count() as f64;
            if tf == 0.0 {
                continue;
            }
            overlap = true;
            let df = bags.iter().filter(|b| b.contains(q)).count() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            let norm = 1.0 - 0.75 + 0.75 * bag.len() as f64 / avg;
            score += idf * tf * 2.5 / (tf + 1.5 * norm);
        }
        if overlap {
            out.push((i, score));
        }
    }
    out.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap().then_with(|| {
            let (x, y) = (&docs[a.0].doc_id, &docs[b.0].doc_id);
            x.parse::<u64>().unwrap().cmp(&y.parse::<u64>().unwrap())
        })
    });
    out
}

/// Candidate set for a whitespace vocabulary, recomputed from scratch.
pub fn candidate_brute(
    subject: &str,
    docs: &[Document],
    vocab: &[String],
    stopwords: &Stopwords,
    top_n: usize,
) -> (BTreeSet<u32>, usize) {
    let query: Vec<&str> = subject.split_whitespace().collect();
    let ranked = bm25_brute(&query, docs);
    let mut set = BTreeSet::new();
    let mut retained = 0;
    for &(i, _) in ranked.iter().take(top_n) {
        let d = &docs[i];
        if !(d.text.contains(subject) || d.title.contains(subject) || d.section_title.contains(subject)) {
            continue;
        }
        retained += 1;
        for w in d.text.split_whitespace() {
            if let Some(id) = vocab.iter().position(|v| v == w) {
                if w.chars().count() >= 3 && !stopwords.contains(w) {
                    set.insert(id as u32);
                }
            }
        }
    }
    (set, retained)
}

pub fn random_word(rng: &mut impl Rng) -> String {
    let len = rng.random_range(1..=6);
    (0..len).map(|_| (b'a' + rng.random_range(0..6u8)) as char).collect()
}

/// A vocabulary of distinct short words plus a few stopwords.
pub fn random_vocab(rng: &mut impl Rng, size: usize) -> Vec<String> {
    let mut words: Vec<String> = STOP_SAMPLE.iter().map(|s| s.to_string()).collect();
    while words.len() < size {
        let w = random_word(rng);
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

fn pick_words(rng: &mut impl Rng, vocab: &[String], count: std::ops::Range<usize>) -> String {
    let n = rng.random_range(count);
    (0..n).map(|_| vocab.choose(rng).unwrap().as_str()).collect::<Vec<_>>().join(" ")
}

pub fn random_corpus(rng: &mut impl Rng, vocab: &[String], n_docs: usize) -> Vec<Document> {
    (0..n_docs)
        .map(|i| {
            let title = pick_words(rng, vocab, 0..3);
            let section_title = pick_words(rng, vocab, 0..2);
            let text = pick_words(rng, vocab, 1..14);
            Document { doc_id: i.to_string(), title, section_title, text }
        })
        .collect()
}

pub fn random_grid(rng: &mut impl Rng, n_layers: usize) -> Vec<ExtractionEvent> {
    let p = rng.random_range(0.0..0.6);
    (1..=n_layers)
        .map(|layer| {
            let matched = rng.random_bool(p);
            ExtractionEvent { layer, kind: SublayerKind::Mhsa, t_star: 7, t_prime: if matched { 7 } else { 3 }, matched }
        })
        .collect()
}

/// Recount of extraction statistics: (rate, mean layers, per-layer rates).
pub fn extraction_brute(grids: &[Vec<ExtractionEvent>]) -> (f64, f64, Vec<f64>) {
    let n = grids.len() as f64;
    let l = grids[0].len();
    let per_layer = (0..l).map(|i| grids.iter().filter(|g| g[i].t_star == g[i].t_prime).count() as f64 / n).collect();
    let with_any = grids.iter().filter(|g| g.iter().any(|e| e.t_prime == e.t_star)).count() as f64 / n;
    let mean = grids.iter().map(|g| g.iter().filter(|e| e.t_prime == e.t_star).count()).sum::<usize>() as f64 / n;
    (with_any, mean, per_layer)
}

/// Attribute rate by nested loops over plain vectors.
pub fn rate_brute(tokens: &[u32], set: &[u32]) -> Option<f64> {
    if set.is_empty() {
        return None;
    }
    let mut hits = 0;
    for t in tokens {
        for s in set {
            if t == s {
                hits += 1;
                break;
            }
        }
    }
    Some(hits as f64 / tokens.len() as f64)
}
