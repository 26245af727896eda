use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracelens::experiments::{run_experiment, ExperimentConfig, ExperimentInputs, ExperimentKind};
use tracelens::io::{file_sha256, load_corpus, load_dataset, load_transformer};
use tracelens::metrics::Stopwords;
use tracelens::synthetic::{SyntheticWorld, WorldSpec};
use tracelens::{Error, Tokenizer};

const EXIT_VALIDATION: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "tracelens", version, about = "Causal interventions on transformer inference traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Relative probability change when attention edges to the last position are cut
    InfoFlow(RunArgs),
    /// Candidate-attribute rate of projected hidden states per position and layer
    AttrRate(RunArgs),
    /// Attribute rate at a reference layer after zeroing MHSA or MLP updates
    SublayerKnockout(RunArgs),
    /// Layers where sublayer updates already encode the prediction
    Extraction(RunArgs),
    /// Extraction after replacing keys and values with early-layer states
    Patching(RunArgs),
    /// Heads whose OV mapping of subject tokens contains the prediction
    Heads(RunArgs),
    /// Gradient-times-activation saliency per layer
    Saliency(RunArgs),
    /// Information-flow curves for several window sizes
    WindowSweep(RunArgs),
    /// Information flow split by whether the subject opens the query
    OrderSplit(RunArgs),
    /// Information flow without blocking the first position
    NoFirstPos(RunArgs),
    /// Blocking all subject positions but one
    SubjectPos(RunArgs),
    /// Check that weights, tokenizer, dataset and corpus load and agree
    Validate(ValidateArgs),
    /// Write a small self-consistent model, tokenizer, dataset and corpus
    MakeSynthetic(SyntheticArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Tokenizer directory or vocab.json
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON config; command-line flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    window_k: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Stopword list, one word per line
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Skip malformed dataset lines instead of failing
    #[arg(long)]
    permissive: bool,
    /// Run in double precision
    #[arg(long)]
    f64: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    permissive: bool,
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 10)]
    queries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate(args) => validate(&args),
        Command::MakeSynthetic(args) => make_synthetic(&args),
        Command::InfoFlow(a) => run(ExperimentKind::InfoFlow, &a),
        Command::AttrRate(a) => run(ExperimentKind::AttrRate, &a),
        Command::SublayerKnockout(a) => run(ExperimentKind::SublayerKnockout, &a),
        Command::Extraction(a) => run(ExperimentKind::Extraction, &a),
        Command::Patching(a) => run(ExperimentKind::Patching, &a),
        Command::Heads(a) => run(ExperimentKind::Heads, &a),
        Command::Saliency(a) => run(ExperimentKind::Saliency, &a),
        Command::WindowSweep(a) => run(ExperimentKind::WindowSweep, &a),
        Command::OrderSplit(a) => run(ExperimentKind::OrderSplit, &a),
        Command::NoFirstPos(a) => run(ExperimentKind::NoFirstPos, &a),
        Command::SubjectPos(a) => run(ExperimentKind::SubjectPos, &a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { EXIT_IO } else { EXIT_VALIDATION })
        }
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::File { path: path.clone(), source: e })?;
            serde_json::from_str(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(k) = args.window_k {
        config.window_k = k;
    }
    if let Some(k) = args.top_k {
        config.top_k = k;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(w) = args.workers {
        config.workers = w;
    }
    Ok(config)
}

fn load_stopwords(path: Option<&Path>) -> Result<Stopwords, Error> {
    path.map_or_else(|| Ok(Stopwords::default()), Stopwords::from_file)
}

fn run(kind: ExperimentKind, args: &RunArgs) -> Result<(), Error> {
    let config = load_config(args)?;
    let tokenizer = Tokenizer::load(&args.tokenizer)?;
    let queries = load_dataset(&args.dataset, args.permissive)?;
    let corpus = args.corpus.as_deref().map(load_corpus).transpose()?;
    let stopwords = load_stopwords(args.stopwords.as_deref())?;
    let weights_hash = file_sha256(&args.weights)?;
    let output = if args.f64 {
        let model = load_transformer::<f64>(&args.weights)?;
        let inputs = ExperimentInputs {
            model: &model,
            tokenizer: &tokenizer,
            queries: &queries,
            corpus: corpus.as_ref(),
            stopwords: &stopwords,
            weights_hash,
        };
        run_experiment(kind, &config, &inputs)?
    } else {
        let model = load_transformer::<f32>(&args.weights)?;
        let inputs = ExperimentInputs {
            model: &model,
            tokenizer: &tokenizer,
            queries: &queries,
            corpus: corpus.as_ref(),
            stopwords: &stopwords,
            weights_hash,
        };
        run_experiment(kind, &config, &inputs)?
    };
    output.write_to(&args.out)?;
    println!("{}: {} queries -> {}", kind, output.report.n_queries, args.out.display());
    Ok(())
}

fn validate(args: &ValidateArgs) -> Result<(), Error> {
    let model = load_transformer::<f32>(&args.weights)?;
    let c = &model.config;
    println!(
        "weights ok: L={} H={} d={} vocab={} sha256={}",
        c.n_layers,
        c.n_heads,
        c.d_model,
        c.vocab_size,
        file_sha256(&args.weights)?
    );
    if let Some(path) = &args.tokenizer {
        let tok = Tokenizer::load(path)?;
        if tok.vocab_size() > c.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} entries but the model vocabulary is {}",
                tok.vocab_size(),
                c.vocab_size
            )));
        }
        println!("tokenizer ok: {} entries", tok.vocab_size());
        if let Some(path) = &args.dataset {
            let queries = load_dataset(path, args.permissive)?;
            let mut untokenizable = 0;
            for q in &queries {
                if tracelens::tokenize_query(&q.query, &q.subject, &tok).is_err() {
                    untokenizable += 1;
                }
            }
            println!("dataset ok: {} queries, {} not tokenizable", queries.len(), untokenizable);
        }
    } else if let Some(path) = &args.dataset {
        println!("dataset ok: {} queries", load_dataset(path, args.permissive)?.len());
    }
    if let Some(path) = &args.corpus {
        println!("corpus ok: {} documents", load_corpus(path)?.len());
    }
    Ok(())
}

fn make_synthetic(args: &SyntheticArgs) -> Result<(), Error> {
    let spec = WorldSpec { n_layers: args.layers, n_queries: args.queries, seed: args.seed, ..WorldSpec::default() };
    let world = SyntheticWorld::generate(&spec)?;
    world.write_to(&args.out)?;
    println!("wrote {} queries to {}", world.queries.len(), args.out.display());
    Ok(())
}
