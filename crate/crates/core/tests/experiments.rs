use tracelens::experiments::{run_experiment, ExperimentConfig, ExperimentInputs, ExperimentKind};
use tracelens::metrics::{Corpus, Stopwords};
use tracelens::synthetic::{SyntheticWorld, WorldSpec};
use tracelens::Error;

fn world() -> SyntheticWorld {
    SyntheticWorld::generate(&WorldSpec { n_queries: 6, ..WorldSpec::default() }).unwrap()
}

#[test]
fn every_kind_runs_on_the_fact_world() {
    let w = world();
    let model = w.transformer().unwrap();
    let tok = w.tokenizer().unwrap();
    let corpus = Corpus::new(w.corpus.clone());
    let stop = Stopwords::default();
    let inputs = ExperimentInputs {
        model: &model,
        tokenizer: &tok,
        queries: &w.queries,
        corpus: Some(&corpus),
        stopwords: &stop,
        weights_hash: "0".repeat(64),
    };
    let config = ExperimentConfig { window_sizes: vec![1, 3], workers: 2, ..ExperimentConfig::default() };
    for kind in ExperimentKind::ALL {
        let out = run_experiment(kind, &config, &inputs).unwrap_or_else(|e| panic!("{kind}: {e}"));
        assert_eq!(out.report.kind, kind.as_str());
        assert_eq!(out.report.n_queries, w.queries.len(), "{kind}");
        assert!(!out.tables.is_empty());
        // Random weights rarely produce attention extraction events, so the
        // heads table may be header only.
        for t in out.tables.iter().filter(|_| kind != ExperimentKind::Heads) {
            assert!(t.csv.lines().count() > 1, "{kind}: empty table {}", t.name);
        }
        let filter = &out.report.aggregates["filter"];
        assert_eq!(filter["kept"], w.queries.len());
    }
}

#[test]
fn reports_do_not_depend_on_worker_count() {
    let w = world();
    let model = w.transformer().unwrap();
    let tok = w.tokenizer().unwrap();
    let stop = Stopwords::default();
    let inputs = ExperimentInputs {
        model: &model,
        tokenizer: &tok,
        queries: &w.queries,
        corpus: None,
        stopwords: &stop,
        weights_hash: String::new(),
    };
    let run = |workers| {
        let config = ExperimentConfig { workers, ..ExperimentConfig::default() };
        run_experiment(ExperimentKind::InfoFlow, &config, &inputs).unwrap()
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
    assert_eq!(a.tables, b.tables);

    let dir = tempfile::tempdir().unwrap();
    a.write_to(dir.path()).unwrap();
    assert!(dir.path().join("info-flow.json").exists());
    assert!(dir.path().join("info_flow.csv").exists());
}

#[test]
fn corpus_experiments_require_a_corpus() {
    let w = world();
    let model = w.transformer().unwrap();
    let tok = w.tokenizer().unwrap();
    let stop = Stopwords::default();
    let inputs = ExperimentInputs {
        model: &model,
        tokenizer: &tok,
        queries: &w.queries,
        corpus: None,
        stopwords: &stop,
        weights_hash: String::new(),
    };
    let err = run_experiment(ExperimentKind::AttrRate, &ExperimentConfig::default(), &inputs).unwrap_err();
    assert!(matches!(err, Error::MissingCorpus(_)));
}

#[test]
fn wrong_attributes_leave_no_survivors() {
    let w = world();
    let model = w.transformer().unwrap();
    let tok = w.tokenizer().unwrap();
    let stop = Stopwords::default();
    let mut queries = w.queries.clone();
    for q in &mut queries {
        q.attribute = "zzzz".into();
    }
    let inputs =
        ExperimentInputs { model: &model, tokenizer: &tok, queries: &queries, corpus: None, stopwords: &stop, weights_hash: String::new() };
    let err = run_experiment(ExperimentKind::InfoFlow, &ExperimentConfig::default(), &inputs).unwrap_err();
    assert!(matches!(err, Error::NoSurvivors));
}
