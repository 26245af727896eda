//! Seeded random models and a small synthetic fact world for tests and demos.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::InterventionPlan;
use crate::io::{write_atomic, write_weights, QueryRecord};
use crate::metrics::Document;
use crate::model::{HeadKind, LinearHead, ModelConfig, Norm, TraceGauges, Transformer, WeightStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::tokenizer::{Tokenizer, WhitespaceTokenizer, UNK_TOKEN};

struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Matrix<T> {
        let normal = Normal::new(0.0, std).expect("valid std");
        Matrix::from_fn(rows, cols, |_, _| T::lit(normal.sample(&mut self.rng)))
    }

    fn vector<T: Scalar>(&mut self, n: usize, mean: f64, std: f64) -> Vec<T> {
        let normal = Normal::new(mean, std).expect("valid std");
        (0..n).map(|_| T::lit(normal.sample(&mut self.rng))).collect()
    }

    fn norm<T: Scalar>(&mut self, d: usize) -> Norm<T> {
        Norm { scale: self.vector(d, 1.0, 0.1), bias: self.vector(d, 0.0, 0.05) }
    }
}

/// Random weights drawn in `f64` and rounded to `T`, so `f32` and `f64`
/// models built from the same seed agree up to rounding.
pub fn random_weights<T: Scalar>(config: &ModelConfig, seed: u64) -> WeightStore<T> {
    let mut s = Sampler { rng: ChaCha8Rng::seed_from_u64(seed) };
    let d = config.d_model;
    let di = config.d_inner;
    let proj = 1.0 / (d as f64).sqrt();
    let mut w = WeightStore::zeros(config);
    w.embedding = s.matrix(config.vocab_size, d, 1.0);
    w.position_embedding = s.matrix(config.max_positions, d, 0.3);
    for l in &mut w.layers {
        l.attn_norm = s.norm(d);
        l.w_q = s.matrix(d, d, 2.0 * proj);
        l.w_k = s.matrix(d, d, 2.0 * proj);
        l.w_v = s.matrix(d, d, proj);
        l.w_o = s.matrix(d, d, proj);
        l.b_q = s.vector(d, 0.0, 0.1);
        l.b_k = s.vector(d, 0.0, 0.1);
        l.b_v = s.vector(d, 0.0, 0.1);
        l.b_o = s.vector(d, 0.0, 0.1);
        l.mlp_norm = s.norm(d);
        l.w_in = s.matrix(di, d, proj);
        l.b_in = s.vector(di, 0.0, 0.1);
        l.w_out = s.matrix(d, di, 1.0 / (di as f64).sqrt());
        l.b_out = s.vector(d, 0.0, 0.1);
    }
    w.final_norm = s.norm(d);
    if config.head_kind == HeadKind::LinearHead {
        w.head = Some(LinearHead { weight: s.matrix(config.vocab_size, d, 1.0), bias: s.vector(config.vocab_size, 0.0, 0.1) });
    }
    w
}

pub fn random_transformer<T: Scalar>(config: &ModelConfig, seed: u64) -> Transformer<T> {
    Transformer::new(config.clone(), random_weights(config, seed)).expect("random weights match config")
}

/// Uniformly random token ids.
pub fn random_tokens(rng: &mut impl Rng, n: usize, vocab_size: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..vocab_size as u32)).collect()
}

/// Size and seed of a synthetic fact world.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub n_queries: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self { n_layers: 4, n_heads: 2, d_model: 16, n_queries: 10, seed: 0 }
    }
}

/// A random model with a whitespace vocabulary, queries whose attribute is
/// whatever the model predicts, and a paragraph corpus mentioning them.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub config: ModelConfig,
    pub weights: WeightStore<f32>,
    pub vocab: Vec<String>,
    pub queries: Vec<QueryRecord>,
    pub corpus: Vec<Document>,
}

const RELATION_WORDS: [&str; 17] = [
    "is", "owned", "by", "plays", "for", "located", "in", "was", "born", "The", "capital", "of", "mother", "tongue",
    "works", "at", "the",
];

/// Query templates; `{}` marks the subject.
const TEMPLATES: [&str; 6] = [
    "{} is owned by",
    "{} plays for",
    "{} is located in",
    "The capital of {} is",
    "{} was born in",
    "The mother tongue of {} is",
];

const SYLLABLES: [&str; 16] = ["ka", "ro", "mi", "tel", "van", "sor", "qui", "len", "bar", "zu", "nor", "pe", "dax", "li", "mun", "ger"];

fn pseudo_word(rng: &mut ChaCha8Rng, capitalized: bool) -> String {
    let n = rng.random_range(2..=3);
    let w: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
    if capitalized {
        let mut c = w.chars();
        c.next().map(|f| f.to_uppercase().collect::<String>() + c.as_str()).unwrap_or_default()
    } else {
        w
    }
}

fn distinct_words(rng: &mut ChaCha8Rng, n: usize, capitalized: bool, taken: &mut Vec<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng, capitalized);
        if !taken.contains(&w) {
            taken.push(w.clone());
            out.push(w);
        }
    }
    out
}

fn join_words(words: &[&String]) -> String {
    words.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ")
}

impl SyntheticWorld {
    pub fn generate(spec: &WorldSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut vocab: Vec<String> = vec![UNK_TOKEN.to_string()];
        vocab.extend(RELATION_WORDS.iter().map(|w| w.to_string()));
        let subject_words = distinct_words(&mut rng, 24, true, &mut vocab.clone());
        vocab.extend(subject_words.iter().cloned());
        let filler = distinct_words(&mut rng, 24, false, &mut vocab.clone());
        vocab.extend(filler.iter().cloned());

        let config = ModelConfig::tiny(spec.n_layers, spec.n_heads, spec.d_model, vocab.len());
        config.validate()?;
        let weights = random_weights::<f32>(&config, spec.seed.wrapping_add(1));
        let model = Transformer::new(config.clone(), weights.clone())?;
        let tokenizer = Tokenizer::Whitespace(WhitespaceTokenizer::from_words(&vocab)?);

        let mut queries = Vec::with_capacity(spec.n_queries);
        let mut attempts = 0;
        while queries.len() < spec.n_queries {
            attempts += 1;
            if attempts > 100 * spec.n_queries.max(1) {
                return Err(Error::Config("could not generate enough synthetic queries".into()));
            }
            let n_subject = rng.random_range(1..=2);
            let parts: Vec<&String> = subject_words.choose_multiple(&mut rng, n_subject).collect();
            let subject = join_words(&parts);
            let template = *TEMPLATES.choose(&mut rng).expect("non-empty");
            let query = template.replace("{}", &subject);
            if queries.iter().any(|q: &QueryRecord| q.query == query) {
                continue;
            }
            let tokens = tokenizer.encode(&query)?;
            let trace = model.forward(&tokens, &InterventionPlan::new(), TraceGauges::MINIMAL)?;
            let predicted = trace.predicted_token();
            let attribute = tokenizer.token_string(predicted);
            if attribute == UNK_TOKEN {
                continue;
            }
            queries.push(QueryRecord {
                query,
                subject,
                attribute,
                relation_id: Some(format!("T{}", TEMPLATES.iter().position(|t| *t == template).expect("template"))),
            });
        }

        let mut corpus = Vec::new();
        let mut next_id = 0usize;
        let mut push = |title: String, text: String, corpus: &mut Vec<Document>| {
            corpus.push(Document { doc_id: next_id.to_string(), title, section_title: String::new(), text });
            next_id += 1;
        };
        for q in &queries {
            for _ in 0..3 {
                let extra: Vec<&String> = filler.choose_multiple(&mut rng, 6).collect();
                let text = format!("{} {} {}", q.subject, join_words(&extra), q.attribute);
                push(q.subject.clone(), text, &mut corpus);
            }
            // Shares one word with the subject but never the full name.
            let first = q.subject.split(' ').next().unwrap_or_default().to_string();
            let extra: Vec<&String> = filler.choose_multiple(&mut rng, 4).collect();
            push(String::new(), format!("{first} {} {}", join_words(&extra), first), &mut corpus);
        }
        for _ in 0..5 {
            let extra: Vec<&String> = filler.choose_multiple(&mut rng, 8).collect();
            push(String::new(), join_words(&extra), &mut corpus);
        }
        Ok(Self { config, weights, vocab, queries, corpus })
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Ok(Tokenizer::Whitespace(WhitespaceTokenizer::from_words(&self.vocab)?))
    }

    pub fn transformer(&self) -> Result<Transformer<f32>> {
        Transformer::new(self.config.clone(), self.weights.clone())
    }

    /// Writes `model.rpwt`, `tokenizer/vocab.json`, `dataset.jsonl` and `corpus.jsonl`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let tok_dir = dir.join("tokenizer");
        std::fs::create_dir_all(&tok_dir).map_err(|e| Error::file(&tok_dir, e))?;
        write_weights(&dir.join("model.rpwt"), &self.config, &self.weights)?;
        let vocab: BTreeMap<&str, usize> = self.vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        write_atomic(&tok_dir.join("vocab.json"), &serde_json::to_vec_pretty(&vocab)?)?;
        let mut dataset = String::new();
        for q in &self.queries {
            dataset.push_str(&serde_json::to_string(q)?);
            dataset.push('\n');
        }
        write_atomic(&dir.join("dataset.jsonl"), dataset.as_bytes())?;
        let mut corpus = String::new();
        for d in &self.corpus {
            corpus.push_str(&serde_json::to_string(d)?);
            corpus.push('\n');
        }
        write_atomic(&dir.join("corpus.jsonl"), corpus.as_bytes())
    }
}
