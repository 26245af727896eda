//! Experiment harness: one runner per analysis, producing a report and tidy
//! plot tables.
//!
//! Every runner prepares the dataset the same way. Queries are tokenized,
//! run once without interventions, and kept only if the predicted token is a
//! prefix of the expected attribute. Per-query work then runs on a bounded
//! worker pool; results are collected in input order and aggregated on one
//! thread, so outputs do not depend on scheduling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attribution::gradient_times_activation;
use crate::error::{Error, Result};
use crate::interventions::presets::{
    all_subject_but_one, exclude_first_position, flow_knockout, subject_first, FlowCondition, KeptSubjectPosition,
    PATCH_SOURCE_LAYERS, WINDOW_SWEEP,
};
use crate::interventions::{patch_positions, sublayer_knockout, InterventionPlan, SublayerKind};
use crate::io::report::{plot_csv, write_atomic, ExperimentReport, PlotRow};
use crate::io::QueryRecord;
use crate::lens::{attribute_rank, head_mapping, project_to_vocab, Projection, DEFAULT_TOP_K, HEAD_MAPPING_TOP_K};
use crate::metrics::{
    aggregate_extraction_stats, attributes_rate, build_candidate_set, embedding_attribute_rate, relative_prob_change,
    CandidateAttributeSet, Corpus, MeanAccumulator, Stopwords,
};
use crate::model::{ForwardTrace, TraceGauges, Transformer};
use crate::scalar::{argmax, Scalar};
use crate::tokenizer::{tokenize_query, TokenizedQuery, Tokenizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    InfoFlow,
    AttrRate,
    SublayerKnockout,
    Extraction,
    Patching,
    Heads,
    Saliency,
    WindowSweep,
    OrderSplit,
    NoFirstPos,
    SubjectPos,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 11] = [
        ExperimentKind::InfoFlow,
        ExperimentKind::AttrRate,
        ExperimentKind::SublayerKnockout,
        ExperimentKind::Extraction,
        ExperimentKind::Patching,
        ExperimentKind::Heads,
        ExperimentKind::Saliency,
        ExperimentKind::WindowSweep,
        ExperimentKind::OrderSplit,
        ExperimentKind::NoFirstPos,
        ExperimentKind::SubjectPos,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::InfoFlow => "info-flow",
            ExperimentKind::AttrRate => "attr-rate",
            ExperimentKind::SublayerKnockout => "sublayer-knockout",
            ExperimentKind::Extraction => "extraction",
            ExperimentKind::Patching => "patching",
            ExperimentKind::Heads => "heads",
            ExperimentKind::Saliency => "saliency",
            ExperimentKind::WindowSweep => "window-sweep",
            ExperimentKind::OrderSplit => "order-split",
            ExperimentKind::NoFirstPos => "no-first-pos",
            ExperimentKind::SubjectPos => "subject-pos",
        }
    }

    pub fn needs_corpus(self) -> bool {
        matches!(self, ExperimentKind::AttrRate | ExperimentKind::SublayerKnockout)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| Error::UnknownExperiment(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyTarget {
    #[default]
    Predicted,
    Attribute,
}

/// Experiment settings. Every field has a default and the effective values
/// are echoed into the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub window_k: usize,
    pub top_k: usize,
    pub seed: u64,
    pub retrieved_paragraphs: usize,
    /// Layer whose subject representation is scored in sublayer knockout.
    pub reference_layer: Option<usize>,
    pub patch_source_layers: Vec<usize>,
    pub window_sizes: Vec<usize>,
    pub head_top_k: usize,
    pub saliency_target: SaliencyTarget,
    /// Projection used for update agreement checks.
    pub extraction_projection: Projection,
    /// Worker threads; `0` lets the pool pick.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            window_k: 9,
            top_k: DEFAULT_TOP_K,
            seed: 0,
            retrieved_paragraphs: 100,
            reference_layer: None,
            patch_source_layers: PATCH_SOURCE_LAYERS.to_vec(),
            window_sizes: WINDOW_SWEEP.to_vec(),
            head_top_k: HEAD_MAPPING_TOP_K,
            saliency_target: SaliencyTarget::Predicted,
            extraction_projection: Projection::Embedding,
            workers: 0,
        }
    }
}

/// 40 for 48-layer models, 22 for 28-layer models, otherwise `⌈5L/6⌉`.
pub fn default_reference_layer(n_layers: usize) -> usize {
    match n_layers {
        48 => 40,
        28 => 22,
        l => (5 * l).div_ceil(6).max(1),
    }
}

/// True when the trimmed predicted token is a non-empty prefix of the attribute.
pub fn is_correct_prediction(predicted: &str, attribute: &str) -> bool {
    let p = predicted.trim();
    !p.is_empty() && attribute.trim().starts_with(p)
}

/// A query that passed tokenization and the correctness filter.
#[derive(Clone, Debug)]
pub struct PreparedQuery<T> {
    pub index: usize,
    pub record: QueryRecord,
    pub tokens: TokenizedQuery,
    pub base: ForwardTrace<T>,
    /// The model's prediction `t*` on the unmodified input.
    pub predicted: u32,
    pub base_prob: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub loaded: usize,
    pub tokenization_failures: usize,
    pub incorrect: usize,
    pub kept: usize,
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn ordered_map<I: Sync, O: Send>(
    pool: &rayon::ThreadPool,
    items: &[I],
    f: impl Fn(&I) -> Result<O> + Sync + Send,
) -> Result<Vec<O>> {
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Tokenizes, runs and filters the dataset. Queries that cannot be tokenized
/// are logged and skipped.
pub fn filter_correct<T: Scalar>(
    model: &Transformer<T>,
    tokenizer: &Tokenizer,
    queries: &[QueryRecord],
) -> Result<(Vec<PreparedQuery<T>>, FilterSummary)> {
    filter_correct_in(&worker_pool(0)?, model, tokenizer, queries)
}

fn filter_correct_in<T: Scalar>(
    pool: &rayon::ThreadPool,
    model: &Transformer<T>,
    tokenizer: &Tokenizer,
    queries: &[QueryRecord],
) -> Result<(Vec<PreparedQuery<T>>, FilterSummary)> {
    let indexed: Vec<(usize, &QueryRecord)> = queries.iter().enumerate().collect();
    let outcomes = ordered_map(pool, &indexed, |&(index, record)| {
        let mut tokens = match tokenize_query(&record.query, &record.subject, tokenizer) {
            Ok(t) => t,
            Err(e) => return Ok(Err(e.to_string())),
        };
        tokens.attribute_token = tokenizer.continuation_token(&record.attribute).ok();
        let base = model.forward(&tokens.token_ids, &InterventionPlan::new(), TraceGauges::MINIMAL)?;
        let predicted = base.predicted_token();
        if !is_correct_prediction(&tokenizer.token_string(predicted), &record.attribute) {
            return Ok(Ok(None));
        }
        let base_prob = base.prob(predicted).as_f64();
        Ok(Ok(Some(PreparedQuery { index, record: record.clone(), tokens, base, predicted, base_prob })))
    })?;
    let mut summary = FilterSummary { loaded: queries.len(), ..Default::default() };
    let mut kept = Vec::new();
    for (outcome, (index, _)) in outcomes.into_iter().zip(&indexed) {
        match outcome {
            Err(message) => {
                log::warn!("query {index}: {message}; skipped");
                summary.tokenization_failures += 1;
            }
            Ok(None) => summary.incorrect += 1,
            Ok(Some(q)) => kept.push(q),
        }
    }
    summary.kept = kept.len();
    if kept.is_empty() {
        log::warn!("no query survived the correctness filter");
    }
    Ok((kept, summary))
}

/// Inputs shared by every experiment.
pub struct ExperimentInputs<'a, T> {
    pub model: &'a Transformer<T>,
    pub tokenizer: &'a Tokenizer,
    pub queries: &'a [QueryRecord],
    pub corpus: Option<&'a Corpus>,
    pub stopwords: &'a Stopwords,
    /// Hash of the weight file, recorded in the report.
    pub weights_hash: String,
}

/// A named output table written next to the report.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub csv: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub tables: Vec<Table>,
}

impl ExperimentOutput {
    /// Writes `<kind>.json` and one `<name>.csv` per table into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        write_atomic(&dir.join(format!("{}.json", self.report.kind)), &self.report.to_json()?)?;
        for t in &self.tables {
            write_atomic(&dir.join(format!("{}.csv", t.name)), t.csv.as_bytes())?;
        }
        Ok(())
    }
}

/// Means keyed by (condition, x), with conditions kept in first-seen order.
#[derive(Default)]
struct Buckets {
    conditions: Vec<String>,
    cells: BTreeMap<(usize, usize), MeanAccumulator>,
}

impl Buckets {
    fn push(&mut self, condition: &str, x: usize, value: f64) {
        let c = match self.conditions.iter().position(|k| k == condition) {
            Some(c) => c,
            None => {
                self.conditions.push(condition.to_string());
                self.conditions.len() - 1
            }
        };
        self.cells.entry((c, x)).or_default().push(value);
    }

    fn rows(&self) -> Vec<PlotRow> {
        self.cells
            .iter()
            .filter_map(|(&(c, x), acc)| {
                acc.mean().map(|mean| PlotRow { x, condition: self.conditions[c].clone(), mean, count: acc.count })
            })
            .collect()
    }

    fn table(&self, name: &str, x_label: &str) -> Table {
        Table { name: name.to_string(), csv: plot_csv(x_label, &self.rows()) }
    }

    /// Per condition, the x with the lowest mean.
    fn minima(&self) -> Value {
        let mut out = serde_json::Map::new();
        for (c, name) in self.conditions.iter().enumerate() {
            let best = self
                .cells
                .iter()
                .filter(|((cc, _), _)| *cc == c)
                .filter_map(|(&(_, x), acc)| acc.mean().map(|m| (x, m)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
            if let Some((x, m)) = best {
                out.insert(name.clone(), json!({ "x": x, "mean": m }));
            }
        }
        Value::Object(out)
    }
}

pub fn run_experiment<T: Scalar>(
    kind: ExperimentKind,
    config: &ExperimentConfig,
    inputs: &ExperimentInputs<'_, T>,
) -> Result<ExperimentOutput> {
    let n_layers = inputs.model.config.n_layers;
    let mut config = config.clone();
    if kind == ExperimentKind::SublayerKnockout {
        let r = config.reference_layer.unwrap_or_else(|| default_reference_layer(n_layers));
        if !(1..=n_layers).contains(&r) {
            return Err(Error::Config(format!("reference layer {r} not in 1..={n_layers}")));
        }
        config.reference_layer = Some(r);
    }
    if config.window_k == 0 || config.window_k % 2 == 0 {
        return Err(Error::Config(format!("window k = {} must be odd and positive", config.window_k)));
    }
    let corpus = if kind.needs_corpus() {
        Some(inputs.corpus.ok_or(Error::MissingCorpus(kind.as_str()))?)
    } else {
        None
    };

    let pool = worker_pool(config.workers)?;
    let (prepared, summary) = filter_correct_in(&pool, inputs.model, inputs.tokenizer, inputs.queries)?;
    if prepared.is_empty() {
        return Err(Error::NoSurvivors);
    }
    let ctx = Context { model: inputs.model, tokenizer: inputs.tokenizer, config: &config, pool: &pool };
    let (per_query, mut aggregates, tables) = match kind {
        ExperimentKind::InfoFlow => flow_experiment(&ctx, &prepared, "info_flow", FlowVariant::Standard)?,
        ExperimentKind::NoFirstPos => flow_experiment(&ctx, &prepared, "no_first_pos", FlowVariant::NoFirstPosition)?,
        ExperimentKind::OrderSplit => flow_experiment(&ctx, &prepared, "order_split", FlowVariant::OrderSplit)?,
        ExperimentKind::SubjectPos => flow_experiment(&ctx, &prepared, "subject_pos", FlowVariant::SubjectPositions)?,
        ExperimentKind::WindowSweep => window_sweep(&ctx, &prepared)?,
        ExperimentKind::AttrRate => attr_rate(&ctx, &prepared, corpus.expect("checked"), inputs.stopwords)?,
        ExperimentKind::SublayerKnockout => {
            sublayer_knockout_experiment(&ctx, &prepared, corpus.expect("checked"), inputs.stopwords)?
        }
        ExperimentKind::Extraction => extraction(&ctx, &prepared)?,
        ExperimentKind::Patching => patching(&ctx, &prepared)?,
        ExperimentKind::Heads => heads(&ctx, &prepared)?,
        ExperimentKind::Saliency => saliency(&ctx, &prepared)?,
    };
    if let Value::Object(map) = &mut aggregates {
        map.insert("filter".into(), serde_json::to_value(&summary)?);
    }
    let mut snapshot = serde_json::to_value(&config)?;
    if let Value::Object(map) = &mut snapshot {
        // Scheduling does not change results, so it stays out of the report.
        map.remove("workers");
        map.insert("kind".into(), json!(kind.as_str()));
        map.insert("model".into(), serde_json::to_value(&inputs.model.config)?);
    }
    let report = ExperimentReport::new(kind.as_str(), snapshot, inputs.weights_hash.clone(), per_query, aggregates)?;
    Ok(ExperimentOutput { report, tables })
}

struct Context<'a, T> {
    model: &'a Transformer<T>,
    tokenizer: &'a Tokenizer,
    config: &'a ExperimentConfig,
    pool: &'a rayon::ThreadPool,
}

type Outcome = (Vec<Value>, Value, Vec<Table>);

fn query_header<T: Scalar>(ctx: &Context<'_, T>, q: &PreparedQuery<T>) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("index".into(), json!(q.index));
    m.insert("query".into(), json!(q.record.query));
    m.insert("subject".into(), json!(q.record.subject));
    m.insert("attribute".into(), json!(q.record.attribute));
    m.insert("predicted".into(), json!(ctx.tokenizer.token_string(q.predicted)));
    m.insert("base_prob".into(), json!(q.base_prob));
    m.insert("subject_positions".into(), json!(q.tokens.subject_positions));
    m
}

/// Relative change of `p(t*)` under each knockout plan.
fn prob_change<T: Scalar>(model: &Transformer<T>, q: &PreparedQuery<T>, plan: &InterventionPlan) -> Result<f64> {
    let trace = model.forward(&q.tokens.token_ids, plan, TraceGauges::MINIMAL)?;
    relative_prob_change(q.base_prob, trace.prob(q.predicted).as_f64())
}

/// Relative change per center layer for blocking `sources` from the last position.
fn flow_curve<T: Scalar>(
    model: &Transformer<T>,
    q: &PreparedQuery<T>,
    sources: &[usize],
    width: usize,
) -> Result<Vec<f64>> {
    (1..=model.config.n_layers)
        .map(|center| {
            let plan = flow_knockout(&q.tokens, sources, center, width, &model.config)?;
            prob_change(model, q, &plan)
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum FlowVariant {
    Standard,
    NoFirstPosition,
    OrderSplit,
    SubjectPositions,
}

fn flow_conditions<T>(q: &PreparedQuery<T>, variant: FlowVariant) -> Vec<(String, Vec<usize>)> {
    let conds: Vec<(String, Vec<usize>)> = match variant {
        FlowVariant::SubjectPositions => KeptSubjectPosition::ALL
            .iter()
            .filter_map(|&k| all_subject_but_one(&q.tokens, k).map(|s| (k.as_str().to_string(), s)))
            .collect(),
        _ => FlowCondition::ALL
            .iter()
            .map(|&c| {
                let mut s = c.sources(&q.tokens);
                if variant == FlowVariant::NoFirstPosition {
                    s = exclude_first_position(&s);
                }
                let label = if variant == FlowVariant::OrderSplit {
                    let subset = if subject_first(&q.tokens) { "subject_first" } else { "subject_later" };
                    format!("{subset}/{}", c.as_str())
                } else {
                    c.as_str().to_string()
                };
                (label, s)
            })
            .collect(),
    };
    conds.into_iter().filter(|(_, s)| !s.is_empty()).collect()
}

fn flow_experiment<T: Scalar>(
    ctx: &Context<'_, T>,
    prepared: &[PreparedQuery<T>],
    name: &str,
    variant: FlowVariant,
) -> Result<Outcome> {
    let width = ctx.config.window_k;
    let curves = ordered_map(ctx.pool, prepared, |q| {
        flow_conditions(q, variant)
            .into_iter()
            .map(|(label, sources)| Ok((label, flow_curve(ctx.model, q, &sources, width)?)))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut buckets = Buckets::default();
    let mut per_query = Vec::with_capacity(prepared.len());
    for (q, conds) in prepared.iter().zip(curves) {
        let mut header = query_header(ctx, q);
        let mut by_cond = serde_json::Map::new();
        for (label, curve) in conds {
            for (i, &v) in curve.iter().enumerate() {
                buckets.push(&label, i + 1, v);
            }
            by_cond.insert(label, json!(curve));
        }
        header.insert("relative_change".into(), Value::Object(by_cond));
        per_query.push(Value::Object(header));
    }
    let aggregates = json!({ "window_k": width, "strongest_drop": buckets.minima() });
    Ok((per_query, aggregates, vec![buckets.table(name, "center")]))
}

fn window_sweep<T: Scalar>(ctx: &Context<'_, T>, prepared: &[PreparedQuery<T>]) -> Result<Outcome> {
    let sizes = &ctx.config.window_sizes;
    if let Some(&bad) = sizes.iter().find(|&&k| k == 0 || k % 2 == 0) {
        return Err(Error::Config(format!("window size {bad} must be odd and positive")));
    }
    let results = ordered_map(ctx.pool, prepared, |q| {
        let conds = flow_conditions(q, FlowVariant::Standard);
        sizes
            .iter()
            .map(|&k| {
                conds
                    .iter()
                    .map(|(label, sources)| Ok((label.clone(), flow_curve(ctx.model, q, sources, k)?)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut buckets: Vec<Buckets> = sizes.iter().map(|_| Buckets::default()).collect();
    let mut per_query = Vec::new();
    for (q, per_k) in prepared.iter().zip(results) {
        let mut header = query_header(ctx, q);
        let mut by_k = serde_json::Map::new();
        for ((k, curves), b) in sizes.iter().zip(per_k).zip(buckets.iter_mut()) {
            let mut by_cond = serde_json::Map::new();
            for (label, curve) in curves {
                for (i, &v) in curve.iter().enumerate() {
                    b.push(&label, i + 1, v);
                }
                by_cond.insert(label, json!(curve));
            }
            by_k.insert(format!("k{k}"), Value::Object(by_cond));
        }
        header.insert("relative_change".into(), Value::Object(by_k));
        per_query.push(Value::Object(header));
    }
    let mut minima = serde_json::Map::new();
    let mut tables = Vec::new();
    for (k, b) in sizes.iter().zip(&buckets) {
        minima.insert(format!("k{k}"), b.minima());
        tables.push(b.table(&format!("window_sweep_k{k}"), "center"));
    }
    Ok((per_query, json!({ "window_sizes": sizes, "strongest_drop": minima }), tables))
}

/// Named positions scored by the attribute-rate experiment.
fn rate_positions<T>(q: &PreparedQuery<T>) -> [(&'static str, usize); 4] {
    let t = &q.tokens;
    [
        ("first_subject", t.first_subject()),
        ("last_subject", t.last_subject()),
        ("after_subject", t.last_subject() + 1),
        ("last", t.last_position()),
    ]
}

fn candidate_sets<T>(
    prepared: &[PreparedQuery<T>],
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    stopwords: &Stopwords,
    top_n: usize,
) -> Result<BTreeMap<String, CandidateAttributeSet>> {
    let mut sets = BTreeMap::new();
    for q in prepared {
        if !sets.contains_key(&q.record.subject) {
            let set = build_candidate_set(&q.record.subject, corpus, tokenizer, stopwords, top_n)?;
            sets.insert(q.record.subject.clone(), set);
        }
    }
    Ok(sets)
}

fn rate_at<T: Scalar>(model: &Transformer<T>, hidden: &[T], set: &CandidateAttributeSet, top_k: usize) -> Result<Option<f64>> {
    attributes_rate(&project_to_vocab(model, hidden, top_k).ids(), set)
}

fn attr_rate<T: Scalar>(
    ctx: &Context<'_, T>,
    prepared: &[PreparedQuery<T>],
    corpus: &Corpus,
    stopwords: &Stopwords,
) -> Result<Outcome> {
    let sets = candidate_sets(prepared, corpus, ctx.tokenizer, stopwords, ctx.config.retrieved_paragraphs)?;
    let top_k = ctx.config.top_k;
    let results = ordered_map(ctx.pool, prepared, |q| {
        let set = &sets[&q.record.subject];
        if set.is_empty() {
            return Ok(None);
        }
        let mut curves = Vec::new();
        for (name, pos) in rate_positions(q) {
            let mut curve = Vec::with_capacity(ctx.model.config.n_layers);
            for layer in 1..=ctx.model.config.n_layers {
                curve.push(rate_at(ctx.model, q.base.residual(layer).row(pos), set, top_k)?.unwrap_or(0.0));
            }
            curves.push((name, curve));
        }
        let subject_ids: Vec<u32> = q.tokens.subject_positions.iter().map(|&p| q.tokens.token_ids[p]).collect();
        let emb = embedding_attribute_rate(ctx.model, &subject_ids, set, top_k)?;
        Ok(Some((curves, emb)))
    })?;
    let mut buckets = Buckets::default();
    let mut per_token_max = MeanAccumulator::default();
    let mut mean_vector = MeanAccumulator::default();
    let mut per_query = Vec::new();
    let mut missing = 0usize;
    for (q, result) in prepared.iter().zip(results) {
        let set = &sets[&q.record.subject];
        let mut header = query_header(ctx, q);
        header.insert("retained_paragraphs".into(), json!(set.retained_paragraphs));
        header.insert("candidate_tokens".into(), json!(set.len()));
        match result {
            None => {
                missing += 1;
                header.insert("attributes_rate".into(), Value::Null);
            }
            Some((curves, emb)) => {
                let mut by_pos = serde_json::Map::new();
                for (name, curve) in curves {
                    for (i, &v) in curve.iter().enumerate() {
                        buckets.push(name, i + 1, v);
                    }
                    by_pos.insert(name.into(), json!(curve));
                }
                header.insert("attributes_rate".into(), Value::Object(by_pos));
                header.insert("embedding_rate".into(), serde_json::to_value(emb)?);
                if let Some(v) = emb.per_token_max {
                    per_token_max.push(v);
                }
                if let Some(v) = emb.mean_vector_rate {
                    mean_vector.push(v);
                }
            }
        }
        per_query.push(Value::Object(header));
    }
    let mut paragraphs = MeanAccumulator::default();
    let mut sizes = MeanAccumulator::default();
    for s in sets.values() {
        paragraphs.push(s.retained_paragraphs as f64);
        sizes.push(s.len() as f64);
    }
    let aggregates = json!({
        "top_k": top_k,
        "missing_candidate_sets": missing,
        "mean_retained_paragraphs": paragraphs.mean(),
        "mean_candidate_tokens": sizes.mean(),
        "embedding_per_token_max": per_token_max.mean(),
        "embedding_mean_vector_rate": mean_vector.mean(),
    });
    Ok((per_query, aggregates, vec![buckets.table("attr_rate", "layer")]))
}

fn sublayer_knockout_experiment<T: Scalar>(
    ctx: &Context<'_, T>,
    prepared: &[PreparedQuery<T>],
    corpus: &Corpus,
    stopwords: &Stopwords,
) -> Result<Outcome> {
    let reference = ctx.config.reference_layer.expect("resolved before dispatch");
    let sets = candidate_sets(prepared, corpus, ctx.tokenizer, stopwords, ctx.config.retrieved_paragraphs)?;
    let top_k = ctx.config.top_k;
    let model = ctx.model;
    let results = ordered_map(ctx.pool, prepared, |q| {
        let set = &sets[&q.record.subject];
        let pos = q.tokens.last_subject();
        let Some(base) = rate_at(model, q.base.residual(reference).row(pos), set, top_k)? else {
            return Ok(None);
        };
        let mut curves = Vec::new();
        for kind in [SublayerKind::Mhsa, SublayerKind::Mlp] {
            let mut curve = Vec::with_capacity(reference);
            for start in 1..=reference {
                let plan = sublayer_knockout(kind, start, pos, &model.config)?;
                let trace = model.forward(&q.tokens.token_ids, &plan, TraceGauges::MINIMAL)?;
                curve.push(rate_at(model, trace.residual(reference).row(pos), set, top_k)?.unwrap_or(0.0));
            }
            curves.push((kind.as_str(), curve));
        }
        Ok(Some((base, curves)))
    })?;
    let mut buckets = Buckets::default();
    let mut per_query = Vec::new();
    let mut baseline = MeanAccumulator::default();
    for (q, result) in prepared.iter().zip(results) {
        let mut header = query_header(ctx, q);
        if let Some((base, curves)) = result {
            baseline.push(base);
            for start in 1..=reference {
                buckets.push("none", start, base);
            }
            let mut by_kind = serde_json::Map::new();
            by_kind.insert("none".into(), json!(base));
            for (kind, curve) in curves {
                for (i, &v) in curve.iter().enumerate() {
                    buckets.push(kind, i + 1, v);
                }
                by_kind.insert(kind.into(), json!(curve));
            }
            header.insert("attributes_rate".into(), Value::Object(by_kind));
        } else {
            header.insert("attributes_rate".into(), Value::Null);
        }
        per_query.push(Value::Object(header));
    }
    let aggregates = json!({
        "reference_layer": reference,
        "baseline_rate": baseline.mean(),
        "measured_queries": baseline.count,
        "lowest_rate": buckets.minima(),
    });
    Ok((per_query, aggregates, vec![buckets.table("sublayer_knockout", "start_layer")]))
}

/// Whether the update at the last position projects to `t_star`.
fn agrees<T: Scalar>(
    model: &Transformer<T>,
    trace: &ForwardTrace<T>,
    kind: SublayerKind,
    layer: usize,
    t_star: u32,
    projection: Projection,
) -> bool {
    let update = trace.update(kind, layer).row(trace.last_position());
    argmax(&projection.logits(model, update)) as u32 == t_star
}

fn event_grid(matched: &[bool], kind: SublayerKind, t_star: u32) -> Vec<crate::lens::ExtractionEvent> {
    matched
        .iter()
        .enumerate()
        .map(|(i, &m)| crate::lens::ExtractionEvent {
            layer: i + 1,
            kind,
            t_star,
            t_prime: if m { t_star } else { u32::MAX },
            matched: m,
        })
        .collect()
}

/// Source sets blocked from the last position in the extraction knockout
/// variants, keyed by a short label.
fn extraction_variants<T>(q: &PreparedQuery<T>) -> Vec<(&'static str, Vec<usize>)> {
    let t = &q.tokens;
    let n = t.last_position();
    let s_last = t.last_subject();
    let all: Vec<usize> = (0..=n).collect();
    let except = |keep: &[usize]| all.iter().copied().filter(|p| !keep.contains(p)).collect::<Vec<_>>();
    let non_subject: Vec<usize> = all.iter().copied().filter(|p| !t.subject_positions.contains(p)).collect();
    let variants = vec![
        ("all_but_subj_last_and_last", except(&[s_last, n])),
        ("all_non_subj_but_last", non_subject.iter().copied().filter(|&p| p != n).collect()),
        ("last", vec![n]),
        ("subj_last", vec![s_last]),
        ("all_but_last", except(&[n])),
        ("subj_last_and_last", vec![s_last, n]),
        ("non_subj", non_subject),
        ("subj", t.subject_positions.clone()),
        ("all_but_subj_last", except(&[s_last])),
        ("all_but_first", except(&[0])),
    ];
    variants.into_iter().filter(|(_, s)| !s.is_empty() && s.len() < all.len()).collect()
}

fn extraction<T: Scalar>(ctx: &Context<'_, T>, prepared: &[PreparedQuery<T>]) -> Result<Outcome> {
    let model = ctx.model;
    let l = model.config.n_layers;
    let projection = ctx.config.extraction_projection;
    let results = ordered_map(ctx.pool, prepared, |q| {
        let t = q.predicted;
        let mhsa: Vec<bool> = (1..=l).map(|ly| agrees(model, &q.base, SublayerKind::Mhsa, ly, t, projection)).collect();
        let mlp: Vec<bool> = (1..=l).map(|ly| agrees(model, &q.base, SublayerKind::Mlp, ly, t, projection)).collect();
        let ranks: Vec<(usize, usize)> = mhsa
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (i + 1, attribute_rank(model, q.base.residual(i).row(q.tokens.last_subject()), t)))
            .collect();
        let mut variants = Vec::new();
        for (label, sources) in extraction_variants(q) {
            let mut grid = Vec::with_capacity(l);
            for layer in 1..=l {
                let mut plan = InterventionPlan::new();
                for &s in &sources {
                    plan.block(layer, q.tokens.last_position(), s)?;
                }
                let trace = model.forward(&q.tokens.token_ids, &plan, TraceGauges::MINIMAL)?;
                grid.push(agrees(model, &trace, SublayerKind::Mhsa, layer, t, projection));
            }
            variants.push((label, grid));
        }
        Ok((mhsa, mlp, ranks, variants))
    })?;

    let mut grids: BTreeMap<String, Vec<Vec<crate::lens::ExtractionEvent>>> = BTreeMap::new();
    let mut order: Vec<String> = vec!["mhsa".into(), "mlp".into()];
    let mut rank_mean = MeanAccumulator::default();
    let mut mlp_queries = 0usize;
    let mut mlp_after_mhsa = 0usize;
    let mut mlp_without_mhsa = 0usize;
    let mut per_query = Vec::new();
    for (q, (mhsa, mlp, ranks, variants)) in prepared.iter().zip(results) {
        let first_mhsa = mhsa.iter().position(|&m| m);
        let first_mlp = mlp.iter().position(|&m| m);
        if let Some(fm) = first_mlp {
            mlp_queries += 1;
            match first_mhsa {
                Some(fa) if fa < fm => mlp_after_mhsa += 1,
                None => mlp_without_mhsa += 1,
                _ => {}
            }
        }
        for &(_, r) in &ranks {
            rank_mean.push(r as f64);
        }
        let layers_of = |g: &[bool]| g.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i + 1).collect::<Vec<_>>();
        let mut header = query_header(ctx, q);
        header.insert("mhsa_layers".into(), json!(layers_of(&mhsa)));
        header.insert("mlp_layers".into(), json!(layers_of(&mlp)));
        header.insert("subject_rank_at_events".into(), json!(ranks));
        let mut knock = serde_json::Map::new();
        grids.entry("mhsa".into()).or_default().push(event_grid(&mhsa, SublayerKind::Mhsa, q.predicted));
        grids.entry("mlp".into()).or_default().push(event_grid(&mlp, SublayerKind::Mlp, q.predicted));
        for (label, grid) in variants {
            knock.insert(label.into(), json!(layers_of(&grid)));
            let key = format!("mhsa-{label}");
            if !order.contains(&key) {
                order.push(key.clone());
            }
            grids.entry(key).or_default().push(event_grid(&grid, SublayerKind::Mhsa, q.predicted));
        }
        header.insert("knockout_mhsa_layers".into(), Value::Object(knock));
        per_query.push(Value::Object(header));
    }

    let mut stats = serde_json::Map::new();
    let mut buckets = Buckets::default();
    for key in &order {
        let g = &grids[key];
        let s = aggregate_extraction_stats(g)?;
        // Each query contributes one 0/1 sample per layer.
        let c = bucket_index(&mut buckets.conditions, key);
        for (i, &r) in s.per_layer_rates.iter().enumerate() {
            buckets.cells.insert((c, i + 1), MeanAccumulator { sum: r * g.len() as f64, count: g.len() });
        }
        stats.insert(key.clone(), serde_json::to_value(&s)?);
    }
    let aggregates = json!({
        "projection": projection,
        "stats": stats,
        "mean_subject_rank_at_mhsa_events": rank_mean.mean(),
        "mhsa_events": rank_mean.count,
        "mlp_extracting_queries": mlp_queries,
        "mlp_preceded_by_mhsa": mlp_after_mhsa,
        "mlp_without_any_mhsa": mlp_without_mhsa,
    });
    Ok((per_query, aggregates, vec![buckets.table("extraction", "layer")]))
}

fn bucket_index(conditions: &mut Vec<String>, key: &str) -> usize {
    match conditions.iter().position(|c| c == key) {
        Some(i) => i,
        None => {
            conditions.push(key.to_string());
            conditions.len() - 1
        }
    }
}

fn patching<T: Scalar>(ctx: &Context<'_, T>, prepared: &[PreparedQuery<T>]) -> Result<Outcome> {
    let model = ctx.model;
    let l = model.config.n_layers;
    let sources: Vec<usize> = ctx.config.patch_source_layers.iter().copied().filter(|&s| s < l).collect();
    let projection = ctx.config.extraction_projection;
    let results = ordered_map(ctx.pool, prepared, |q| {
        let t = &q.tokens;
        let groups = [
            ("subject", t.subject_positions.clone()),
            ("last", vec![t.last_position()]),
            ("non_subject", t.relation_positions.clone()),
        ];
        let base_any = (1..=l).any(|ly| agrees(model, &q.base, SublayerKind::Mhsa, ly, q.predicted, projection));
        let mut out = Vec::new();
        for (name, positions) in groups {
            if positions.is_empty() {
                continue;
            }
            for &src in &sources {
                let plan = patch_positions(&positions, src, &model.config)?;
                let trace = model.forward(&t.token_ids, &plan, TraceGauges::MINIMAL)?;
                let any = (1..=l).any(|ly| agrees(model, &trace, SublayerKind::Mhsa, ly, q.predicted, projection));
                out.push((name, src, any));
            }
        }
        Ok((base_any, out))
    })?;
    let mut buckets = Buckets::default();
    let mut baseline = MeanAccumulator::default();
    let mut per_query = Vec::new();
    for (q, (base_any, cells)) in prepared.iter().zip(results) {
        baseline.push(f64::from(u8::from(base_any)));
        let mut header = query_header(ctx, q);
        header.insert("baseline_extraction".into(), json!(base_any));
        let mut by_group = serde_json::Map::new();
        for (name, src, any) in cells {
            buckets.push(name, src, f64::from(u8::from(any)));
            by_group.entry(name).or_insert_with(|| json!({})).as_object_mut().expect("object").insert(src.to_string(), json!(any));
        }
        header.insert("extraction_after_patch".into(), Value::Object(by_group));
        per_query.push(Value::Object(header));
    }
    let aggregates = json!({
        "source_layers": sources,
        "baseline_extraction_rate": baseline.mean(),
    });
    Ok((per_query, aggregates, vec![buckets.table("patching", "source_layer")]))
}

fn heads<T: Scalar>(ctx: &Context<'_, T>, prepared: &[PreparedQuery<T>]) -> Result<Outcome> {
    let model = ctx.model;
    let l = model.config.n_layers;
    let projection = ctx.config.extraction_projection;
    let top_k = ctx.config.head_top_k;
    let results = ordered_map(ctx.pool, prepared, |q| {
        let subject_tokens: BTreeSet<u32> = q.tokens.subject_positions.iter().map(|&p| q.tokens.token_ids[p]).collect();
        let mut events = Vec::new();
        for layer in 1..=l {
            if !agrees(model, &q.base, SublayerKind::Mhsa, layer, q.predicted, projection) {
                continue;
            }
            let mut found = Vec::new();
            for head in 0..model.config.n_heads {
                for &tok in &subject_tokens {
                    let row = head_mapping(model, layer, head, tok, top_k)?;
                    if row.top_tokens.iter().any(|s| s.id == q.predicted) {
                        found.push((head, tok));
                    }
                }
            }
            events.push((layer, found));
        }
        Ok(events)
    })?;
    let mut buckets = Buckets::default();
    let mut head_counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut with_mapping = MeanAccumulator::default();
    let mut per_query = Vec::new();
    for (q, events) in prepared.iter().zip(results) {
        let mut header = query_header(ctx, q);
        let mut list = Vec::new();
        for (layer, found) in events {
            let hit = !found.is_empty();
            with_mapping.push(f64::from(u8::from(hit)));
            buckets.push("mapping_rate", layer, f64::from(u8::from(hit)));
            let heads: BTreeSet<usize> = found.iter().map(|&(h, _)| h).collect();
            for &h in &heads {
                *head_counts.entry((layer, h)).or_default() += 1;
            }
            list.push(json!({ "layer": layer, "heads": heads, "source_tokens": found.iter().map(|&(_, t)| t).collect::<BTreeSet<_>>() }));
        }
        header.insert("events".into(), json!(list));
        per_query.push(Value::Object(header));
    }
    let mut frequent: Vec<((usize, usize), usize)> = head_counts.into_iter().collect();
    frequent.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let aggregates = json!({
        "head_top_k": top_k,
        "events": with_mapping.count,
        "events_with_mapping_rate": with_mapping.mean(),
        "distinct_heads": frequent.len(),
        "heads_by_frequency": frequent.iter().map(|((l, h), c)| json!({ "layer": l, "head": h, "events": c })).collect::<Vec<_>>(),
    });
    Ok((per_query, aggregates, vec![buckets.table("heads", "layer")]))
}

/// Position role used to pool saliency across queries of different lengths.
pub fn saliency_bucket(q: &TokenizedQuery, position: usize) -> &'static str {
    if position == q.last_position() {
        "last"
    } else if q.subject_positions.contains(&position) {
        if position == q.last_subject() {
            "last_subject"
        } else if position == q.first_subject() {
            "first_subject"
        } else {
            "other_subject"
        }
    } else if q.relation_positions.first() == Some(&position) {
        "first_relation"
    } else {
        "other_relation"
    }
}

fn saliency<T: Scalar>(ctx: &Context<'_, T>, prepared: &[PreparedQuery<T>]) -> Result<Outcome> {
    let model = ctx.model;
    let l = model.config.n_layers;
    let target_mode = ctx.config.saliency_target;
    let results = ordered_map(ctx.pool, prepared, |q| {
        let target = match target_mode {
            SaliencyTarget::Predicted => q.predicted,
            SaliencyTarget::Attribute => q.tokens.attribute_token.unwrap_or(q.predicted),
        };
        let maps = (0..=l)
            .map(|layer| gradient_times_activation(model, &q.base, target, layer).map(|m| m.scores))
            .collect::<Result<Vec<_>>>()?;
        Ok((target, maps))
    })?;
    let mut buckets = Buckets::default();
    let mut heatmap = String::from("query,layer,position,score\n");
    let mut per_query = Vec::new();
    for (q, (target, maps)) in prepared.iter().zip(results) {
        for (layer, scores) in maps.iter().enumerate() {
            let mut pooled: BTreeMap<&str, f64> = BTreeMap::new();
            for (pos, &s) in scores.iter().enumerate() {
                *pooled.entry(saliency_bucket(&q.tokens, pos)).or_default() += s;
                heatmap.push_str(&format!("{},{layer},{pos},{s}\n", q.index));
            }
            for name in ["first_subject", "other_subject", "last_subject", "first_relation", "other_relation", "last"] {
                if let Some(&v) = pooled.get(name) {
                    buckets.push(name, layer, v);
                }
            }
        }
        let mut header = query_header(ctx, q);
        header.insert("target".into(), json!(target));
        header.insert("scores_by_layer".into(), json!(maps));
        per_query.push(Value::Object(header));
    }
    let aggregates = json!({ "target": target_mode, "layers": l + 1 });
    Ok((
        per_query,
        aggregates,
        vec![buckets.table("saliency", "layer"), Table { name: "saliency_heatmap".into(), csv: heatmap }],
    ))
}
