//! Gradient and metric checks shared by the integration tests and the
//! acceptance suite.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracelens::attribution::{gradient_times_activation, logit_gradient};
use tracelens::interventions::{knockout_window, sublayer_knockout, KnockoutWindow};
use tracelens::metrics::*;
use tracelens::model::{Activation, Layout, ModelConfig, TraceGauges};
use tracelens::synthetic::{random_tokens, random_transformer};
use tracelens::tokenizer::WhitespaceTokenizer;
use tracelens::{InterventionPlan, Matrix, SublayerKind, Tokenizer, Transformer64};

use super::*;

pub const FD_STEP: f64 = 1e-4;

pub fn finite_difference(
    model: &Transformer64,
    residual: &Matrix<f64>,
    layer: usize,
    plan: &InterventionPlan,
    target: u32,
) -> Matrix<f64> {
    let (n, d) = residual.shape();
    Matrix::from_fn(n, d, |i, k| {
        let mut plus = residual.clone();
        let mut minus = residual.clone();
        plus.set(i, k, plus.get(i, k) + FD_STEP);
        minus.set(i, k, minus.get(i, k) - FD_STEP);
        let fp = model.logits_from_layer(layer, &plus, plan).unwrap()[target as usize];
        let fm = model.logits_from_layer(layer, &minus, plan).unwrap()[target as usize];
        (fp - fm) / (2.0 * FD_STEP)
    })
}

/// Largest elementwise relative error. Entries below `1e-6` in magnitude are
/// compared absolutely, since the difference quotient has ~1e-9 noise.
pub fn relative_error(analytic: &Matrix<f64>, numeric: &Matrix<f64>) -> f64 {
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-6))
        .fold(0.0, f64::max)
}

pub fn gradient_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let n_heads = [1, 2][rng.random_range(0..2)];
    let d_model = [4, 8][rng.random_range(0..2)];
    let mut config = ModelConfig::tiny(rng.random_range(1..=3), n_heads, d_model, 12);
    if rng.random_bool(0.3) {
        config.layout = Layout::Parallel;
    }
    if rng.random_bool(0.2) {
        config.activation = Activation::Relu;
    }
    config
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Analytic gradients vs. central differences on random fp64 models, plus
/// the saliency normalization properties. Returns the worst relative error.
pub fn check_gradients(models: u64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..models {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = gradient_config(&mut rng);
        let model = random_transformer::<f64>(&config, seed + 100);
        let n = rng.random_range(2..=6);
        let tokens = random_tokens(&mut rng, n, config.vocab_size);
        let mut plan = InterventionPlan::new();
        if seed % 3 == 1 {
            let window = KnockoutWindow { center_layer: 1, width: 3, source_positions: vec![0], target_position: n - 1 };
            plan = knockout_window(&window, &config).map_err(|e| e.to_string())?;
        }
        if seed % 4 == 2 {
            plan = plan.merge(&sublayer_knockout(SublayerKind::Mlp, 1, n - 1, &config).map_err(|e| e.to_string())?);
        }
        let trace = model.forward(&tokens, &plan, TraceGauges::MINIMAL).map_err(|e| e.to_string())?;
        let target = rng.random_range(0..config.vocab_size as u32);
        for layer in 0..=config.n_layers {
            let analytic = logit_gradient(&model, &trace, target, layer).map_err(|e| e.to_string())?;
            let numeric = finite_difference(&model, trace.residual(layer), layer, &plan, target);
            let err = relative_error(&analytic, &numeric);
            worst = worst.max(err);
            ensure(err < 1e-3, || format!("seed {seed} layer {layer}: relative error {err:e}"))?;

            let map = gradient_times_activation(&model, &trace, trace.predicted_token(), layer).map_err(|e| e.to_string())?;
            let total: f64 = map.scores.iter().sum();
            ensure((total - 1.0).abs() < 1e-6, || format!("seed {seed} layer {layer}: saliency sums to {total}"))?;
            ensure(map.scores.iter().all(|&s| s >= 0.0), || format!("seed {seed}: negative saliency"))?;
            if layer == config.n_layers {
                ensure(map.scores[n - 1] == 1.0, || format!("seed {seed}: mass {:?} at layer L", map.scores))?;
            }
        }
    }
    Ok(worst)
}

pub fn bm25_hand_example() -> Result<(), String> {
    let doc = |id: &str, text: &str| Document {
        doc_id: id.into(),
        title: String::new(),
        section_title: String::new(),
        text: text.into(),
    };
    // Lengths 3, 2, 4 (avgdl 3); df(apple) = 1, df(cherry) = 2.
    let corpus = Corpus::new(vec![
        doc("1", "apple banana apple"),
        doc("2", "banana cherry"),
        doc("3", "cherry cherry cherry date"),
    ]);
    let ranked = bm25_rank(&["apple".into(), "cherry".into()], &corpus, 10).map_err(|e| e.to_string())?;
    let expected = [("1", 1.401184647159609), ("3", 0.723082506531901), ("2", 0.5529454461714537)];
    ensure(ranked.len() == 3, || format!("{} hits", ranked.len()))?;
    for (r, (id, score)) in ranked.iter().zip(expected) {
        ensure(r.doc_id == id && (r.score - score).abs() < 1e-9, || format!("{}: {} vs {id}: {score}", r.doc_id, r.score))?;
    }
    Ok(())
}

pub fn bm25_instances(cases: u64) -> Result<(), String> {
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = random_vocab(&mut rng, 30);
        let n_docs = rng.random_range(1..=50);
        let docs = random_corpus(&mut rng, &vocab, n_docs);
        let corpus = Corpus::new(docs.clone());
        let n_terms = rng.random_range(1..4);
        let query: Vec<String> = (0..n_terms).map(|_| vocab[rng.random_range(0..vocab.len())].clone()).collect();
        let refs: Vec<&str> = query.iter().map(String::as_str).collect();
        let expected = bm25_brute(&refs, &docs);
        let got = bm25_rank(&query, &corpus, usize::MAX).map_err(|e| e.to_string())?;
        ensure(got.len() == expected.len(), || format!("seed {seed}: {} vs {} hits", got.len(), expected.len()))?;
        for (g, (i, s)) in got.iter().zip(expected) {
            ensure(g.index == i && (g.score - s).abs() < 1e-9, || format!("seed {seed}: doc {} vs {i}", g.index))?;
        }
    }
    Ok(())
}

pub fn candidate_instances(cases: u64) -> Result<(), String> {
    let stopwords = Stopwords::default();
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let vocab = random_vocab(&mut rng, 40);
        let n_docs = rng.random_range(1..=50);
        let docs = random_corpus(&mut rng, &vocab, n_docs);
        let corpus = Corpus::new(docs.clone());
        let tokenizer = Tokenizer::Whitespace(WhitespaceTokenizer::from_words(&vocab).map_err(|e| e.to_string())?);
        let first = vocab[rng.random_range(6..vocab.len())].clone();
        let subject = if rng.random_bool(0.5) {
            first
        } else {
            format!("{first} {}", vocab[rng.random_range(6..vocab.len())])
        };
        let top_n = rng.random_range(1..=30);
        let set = build_candidate_set(&subject, &corpus, &tokenizer, &stopwords, top_n).map_err(|e| e.to_string())?;
        let (expected, retained) = candidate_brute(&subject, &docs, &vocab, &stopwords, top_n);
        ensure(set.tokens == expected, || format!("seed {seed}: token sets differ"))?;
        ensure(set.retained_paragraphs == retained, || format!("seed {seed}: retained {} vs {retained}", set.retained_paragraphs))?;
        let again = build_candidate_set(&subject, &corpus, &tokenizer, &stopwords, top_n).map_err(|e| e.to_string())?;
        ensure(again == set, || format!("seed {seed}: rebuild differs"))?;
    }
    Ok(())
}

pub fn rate_and_stats_instances(cases: u64) -> Result<(), String> {
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let universe = 200u32;
        let set_ids: Vec<u32> = (0..rng.random_range(0..60)).map(|_| rng.random_range(0..universe)).collect();
        let tokens: Vec<u32> = (0..rng.random_range(1..80)).map(|_| rng.random_range(0..universe)).collect();
        let set = CandidateAttributeSet {
            subject: "s".into(),
            tokens: set_ids.iter().copied().collect::<BTreeSet<_>>(),
            retained_paragraphs: 1,
        };
        let rate = attributes_rate(&tokens, &set).map_err(|e| e.to_string())?;
        ensure(rate == rate_brute(&tokens, &set_ids), || format!("seed {seed}: rate {rate:?}"))?;

        let l = rng.random_range(1..12);
        let grids: Vec<_> = (0..rng.random_range(1..30)).map(|_| random_grid(&mut rng, l)).collect();
        let stats = aggregate_extraction_stats(&grids).map_err(|e| e.to_string())?;
        let (rate, mean, per_layer) = extraction_brute(&grids);
        ensure((stats.extraction_rate - rate).abs() < 1e-12, || format!("seed {seed}: extraction rate"))?;
        ensure((stats.mean_extracting_layers - mean).abs() < 1e-12, || format!("seed {seed}: mean layers"))?;
        ensure(stats.per_layer_rates.len() == l, || format!("seed {seed}: per-layer length"))?;
        for (a, b) in stats.per_layer_rates.iter().zip(per_layer) {
            ensure((a - b).abs() < 1e-12, || format!("seed {seed}: per-layer rate"))?;
        }
    }
    Ok(())
}
