//! `finrag`: operator entry points.
//!
//! Exit codes: 0 success, 1 data error, 2 usage error.

use std::fmt::Display;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use finrag_core::corpus::{read_jsonl_documents, read_legacy_documents, write_jsonl_documents};
use finrag_core::encoder::{
    read_training_examples, DEFAULT_EMBEDDING_DIM, DEFAULT_FEATURE_DIM, DEFAULT_LEARNING_RATE,
    DEFAULT_SEED,
};
use finrag_core::evaluation::{read_judgments, render_table, BenchmarkEncoder, DEFAULT_EVAL_K};
use finrag_core::gate::{calibrate_threshold, ingest_document, read_holdout, DEFAULT_QUANTILE};
use finrag_core::synthetic::{SyntheticConfig, SyntheticCorpus};
use finrag_core::{
    run_benchmark, ChatOptions, ChatRequest, ChatResponse, Document, EncoderPair, Origin,
    SimilarityMetric, VectorIndex, DEFAULT_CHUNK_LIMIT,
};
use finrag_service::{BackendMode, ServiceConfig, WebMode};
use parking_lot::RwLock;
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "finrag",
    version,
    about = "Threshold-gated local and web retrieval for question answering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk, embed and index a corpus into a snapshot file.
    Ingest(IngestArgs),
    /// Train the dual encoder on contrastive examples.
    Train(TrainArgs),
    /// Pick the similarity threshold from held-out query/chunk pairs.
    Calibrate(CalibrateArgs),
    /// MAP@k and MAR@k for each encoder and metric.
    Eval(EvalArgs),
    /// Answer one question through the full pipeline.
    Query(QueryArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Write a seeded synthetic corpus with training, judgment and holdout files.
    Synth(SynthArgs),
}

/// Encoder selection shared by subcommands that embed text.
#[derive(Args)]
struct EncoderArgs {
    /// Trained model file. Without one, an untrained encoder with tied key
    /// and query matrices is built from --seed.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

impl EncoderArgs {
    fn load(&self) -> Result<EncoderPair, Failure> {
        match &self.model {
            Some(path) => load_model(path),
            None => Ok(EncoderPair::tied(
                DEFAULT_EMBEDDING_DIM,
                DEFAULT_FEATURE_DIM,
                self.seed,
            )),
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Corpus uses the semicolon-separated legacy line format.
    #[arg(long)]
    legacy: bool,
    /// Add to an existing snapshot instead of replacing it.
    #[arg(long)]
    append: bool,
    #[arg(long, default_value_t = DEFAULT_CHUNK_LIMIT, value_parser = positive_usize)]
    chunk_limit: usize,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// JSONL of {query_text, positive_text, negative_texts}.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20, value_parser = positive_usize)]
    epochs: usize,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE, value_parser = positive_f64)]
    lr: f64,
    /// Seeds both the initialization and the example order.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EMBEDDING_DIM, value_parser = positive_usize)]
    dim: usize,
    #[arg(long, default_value_t = DEFAULT_FEATURE_DIM, value_parser = positive_usize)]
    features: usize,
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    /// JSONL of {query_text, positive_text}.
    #[arg(long)]
    holdout: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = DEFAULT_QUANTILE, value_parser = open_unit_interval)]
    quantile: f64,
    #[arg(long, default_value = "cosine")]
    metric: SimilarityMetric,
    /// Where to write the full report; defaults to the model path with a
    /// `.calibration.json` extension.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// JSONL of {query_id, query_text, relevant_chunk_ids}.
    #[arg(long)]
    judgments: PathBuf,
    #[arg(long)]
    legacy: bool,
    /// Trained model, labelled by file stem. Repeatable.
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    /// Include a randomly initialized, untrained encoder.
    #[arg(long)]
    untrained: bool,
    /// Include the tied (token-overlap) encoder. The default when no other
    /// encoder is selected.
    #[arg(long)]
    lexical: bool,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Repeatable; all three when omitted.
    #[arg(long = "metric")]
    metrics: Vec<SimilarityMetric>,
    #[arg(short, long, default_value_t = DEFAULT_EVAL_K, value_parser = positive_usize)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_CHUNK_LIMIT, value_parser = positive_usize)]
    chunk_limit: usize,
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct QueryArgs {
    question: String,
    /// Service config file (TOML or JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Directory with queries.json and pages/ to answer web searches from.
    #[arg(long, conflicts_with = "search_endpoint")]
    web_fixture: Option<PathBuf>,
    /// Search API url; `{query}` and `{count}` are substituted if present.
    #[arg(long)]
    search_endpoint: Option<String>,
    /// Generation API url; the stub backend is used otherwise.
    #[arg(long)]
    backend_endpoint: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(short, long, value_parser = positive_usize)]
    k: Option<usize>,
    #[arg(short, long, value_parser = positive_usize)]
    j: Option<usize>,
    #[arg(long)]
    metric: Option<SimilarityMetric>,
    #[arg(long)]
    no_web: bool,
    #[arg(long)]
    no_kb: bool,
    #[arg(long)]
    no_auto_update: bool,
    /// Question date; RFC 3339, `YYYY-MM-DD HH:MM:SS` or `YYYY-MM-DD`.
    #[arg(long)]
    date: Option<String>,
    /// Include the assembled prompt.
    #[arg(long)]
    debug: bool,
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured bind address.
    #[arg(long)]
    bind: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SyntheticConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SyntheticConfig::default().documents, value_parser = positive_usize)]
    documents: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().heldout_queries)]
    heldout_queries: usize,
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(x) if x > 0.0 && x.is_finite() => Ok(x),
        Ok(_) => Err("must be a positive number".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn open_unit_interval(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(x) if x > 0.0 && x < 1.0 => Ok(x),
        Ok(_) => Err("must lie strictly between 0 and 1".into()),
        Err(e) => Err(e.to_string()),
    }
}

enum Failure {
    Usage(String),
    Data(String),
}

fn data(e: impl Display) -> Failure {
    Failure::Data(e.to_string())
}

fn at(path: &Path) -> impl Fn(&dyn Display) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| at(path)(&e))
}

/// Writes through a sibling temporary file so readers never see a partial file.
fn write_atomically(
    path: &Path,
    write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), Failure> {
    let tmp = path.with_extension("tmp");
    let result = File::create(&tmp).and_then(|f| {
        let mut w = BufWriter::new(f);
        write(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()
    });
    result
        .and_then(|()| std::fs::rename(&tmp, path))
        .map_err(|e| at(path)(&e))
}

fn load_model(path: &Path) -> Result<EncoderPair, Failure> {
    EncoderPair::load(open(path)?).map_err(|e| at(path)(&e))
}

fn read_documents(path: &Path, legacy: bool) -> Result<Vec<Document>, Failure> {
    let reader = open(path)?;
    let docs = if legacy {
        read_legacy_documents(reader)
    } else {
        read_jsonl_documents(reader)
    };
    docs.map_err(|e| at(path)(&e))
}

fn print_json(value: &impl Serialize) {
    println!(
        "{}",
        serde_json::to_string(value).expect("serializable output")
    );
}

fn ingest(args: IngestArgs) -> Result<(), Failure> {
    let docs = read_documents(&args.corpus, args.legacy)?;
    let encoder = args.encoder.load()?;
    let index = if args.append && args.index.exists() {
        VectorIndex::load(open(&args.index)?).map_err(|e| at(&args.index)(&e))?
    } else {
        VectorIndex::new(encoder.dim())
    };
    if index.dim() != encoder.dim() {
        return Err(data(format!(
            "{}: index dimension {} does not match encoder dimension {}",
            args.index.display(),
            index.dim(),
            encoder.dim()
        )));
    }
    let kb = RwLock::new(index);
    let mut chunks = 0;
    for doc in &docs {
        chunks += ingest_document(&encoder, &kb, doc, args.chunk_limit)
            .map_err(|e| data(format!("document {}: {e}", doc.id)))?;
    }
    write_atomically(&args.index, |w| kb.read().save(w))?;
    println!("{} documents, {} chunks", docs.len(), chunks);
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let examples = read_training_examples(open(&args.data)?).map_err(|e| at(&args.data)(&e))?;
    let mut encoder = EncoderPair::new(args.dim, args.features, args.seed);
    let report = encoder
        .train(&examples, args.epochs, args.lr, args.seed)
        .map_err(data)?;
    write_atomically(&args.out, |w| encoder.save(w))?;
    let last = report
        .epoch_objectives
        .last()
        .copied()
        .unwrap_or(report.initial_objective);
    if args.pretty {
        println!(
            "{} examples, {} epochs at lr {}: mean objective {:.6} -> {:.6}",
            examples.len(),
            report.epochs,
            report.learning_rate,
            report.initial_objective,
            last
        );
        println!("model written to {}", args.out.display());
    } else {
        print_json(&json!({
            "examples": examples.len(),
            "report": report,
            "model": args.out,
        }));
    }
    Ok(())
}

fn calibrate(args: CalibrateArgs) -> Result<(), Failure> {
    let holdout = read_holdout(open(&args.holdout)?).map_err(|e| at(&args.holdout)(&e))?;
    let encoder = load_model(&args.model)?;
    let calibration =
        calibrate_threshold(&encoder, &holdout, args.metric, args.quantile).map_err(data)?;
    let report_path = args
        .report
        .unwrap_or_else(|| args.model.with_extension("calibration.json"));
    write_atomically(&report_path, |w| {
        serde_json::to_writer_pretty(&mut *w, &calibration)?;
        w.write_all(b"\n")
    })?;
    if args.pretty {
        println!(
            "c = {:.6} ({} pairs, quantile {}, {})",
            calibration.threshold,
            calibration.n,
            calibration.quantile,
            calibration.metric.as_str()
        );
        println!("report written to {}", report_path.display());
    } else {
        print_json(&json!({
            "threshold": calibration.threshold,
            "n": calibration.n,
            "quantile": calibration.quantile,
            "metric": calibration.metric,
            "report": report_path,
        }));
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let corpus = read_documents(&args.corpus, args.legacy)?;
    let judgments = read_judgments(open(&args.judgments)?).map_err(|e| at(&args.judgments)(&e))?;
    let mut owned: Vec<(String, EncoderPair)> = Vec::new();
    for path in &args.models {
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        owned.push((label, load_model(path)?));
    }
    if args.untrained {
        owned.push((
            "untrained".into(),
            EncoderPair::new(DEFAULT_EMBEDDING_DIM, DEFAULT_FEATURE_DIM, args.seed),
        ));
    }
    if args.lexical || owned.is_empty() {
        owned.push((
            "lexical".into(),
            EncoderPair::tied(DEFAULT_EMBEDDING_DIM, DEFAULT_FEATURE_DIM, args.seed),
        ));
    }
    let encoders: Vec<BenchmarkEncoder<'_>> = owned
        .iter()
        .map(|(label, encoder)| BenchmarkEncoder {
            label: label.clone(),
            encoder,
        })
        .collect();
    let metrics = if args.metrics.is_empty() {
        SimilarityMetric::ALL.to_vec()
    } else {
        args.metrics.clone()
    };
    let reports = run_benchmark(
        &corpus,
        &judgments,
        &encoders,
        &metrics,
        args.k,
        args.chunk_limit,
    )
    .map_err(data)?;
    if args.pretty {
        print!("{}", render_table(&reports));
    } else {
        print_json(&reports);
    }
    Ok(())
}

fn query_config(args: &QueryArgs) -> Result<ServiceConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => ServiceConfig::from_path(path).map_err(data)?,
        None => ServiceConfig::default(),
    };
    if let Some(p) = &args.index {
        config.index_snapshot = Some(p.clone());
    }
    if let Some(p) = &args.model {
        config.encoder_model = Some(p.clone());
    }
    if let Some(dir) = &args.web_fixture {
        config.web = WebMode::Fixture { dir: dir.clone() };
        config.gate.use_web = true;
    }
    if let Some(endpoint) = &args.search_endpoint {
        config.web = WebMode::Http {
            endpoint: endpoint.clone(),
            timeout_ms: finrag_service::DEFAULT_TIMEOUT_MS,
        };
        config.gate.use_web = true;
    }
    if let Some(endpoint) = &args.backend_endpoint {
        config.backend = BackendMode::Http {
            endpoint: endpoint.clone(),
            timeout_ms: finrag_service::DEFAULT_TIMEOUT_MS,
        };
    }
    if let Some(c) = args.threshold {
        config.gate.threshold = c;
    }
    if let Some(k) = args.k {
        config.gate.k = k;
    }
    if let Some(j) = args.j {
        config.prompt.j = j;
    }
    if let Some(m) = args.metric {
        config.gate.metric = m;
    }
    config.persist_index = false;
    config
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(config)
}

fn print_answer(response: &ChatResponse, threshold: f64) {
    println!("{}", response.answer);
    if !response.citation_text.is_empty() {
        println!("\n{}", response.citation_text);
    }
    for c in &response.citations {
        if c.provenance == Origin::Web {
            println!("  {}. {}", c.rank, c.url_or_local);
        }
    }
    let g = &response.gate;
    let local = g
        .local_max_score
        .map_or("n/a".to_string(), |s| format!("{s:.4}"));
    println!(
        "\nlocal max {local} vs threshold {threshold:.4}; web searches {}; documents added {}{}",
        g.web_calls,
        g.kb_documents_added,
        if g.web_degraded {
            "; web unavailable"
        } else {
            ""
        }
    );
    if let Some(prompt) = &response.prompt {
        println!("\n--- prompt\n{prompt}");
    }
}

fn query(args: QueryArgs) -> Result<(), Failure> {
    let config = query_config(&args)?;
    let pipeline = finrag_service::build_pipeline(&config).map_err(data)?;
    let options = ChatOptions {
        use_web: args.no_web.then_some(false),
        use_kb: args.no_kb.then_some(false),
        auto_update: args.no_auto_update.then_some(false),
        debug: args.debug,
        timings: true,
        ..ChatOptions::default()
    };
    let request = ChatRequest {
        question: args.question.clone(),
        question_date: args.date.clone(),
        options: Some(options),
    };
    let response = pipeline.chat(&request).map_err(|e| {
        if e.is_client_error() {
            Failure::Usage(e.to_string())
        } else {
            data(e)
        }
    })?;
    if args.pretty {
        print_answer(&response, pipeline.settings.gate.threshold);
    } else {
        print_json(&response);
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    let mut config = match &args.config {
        Some(path) => ServiceConfig::from_path(path).map_err(|e| Failure::Usage(e.to_string()))?,
        None => ServiceConfig::default(),
    };
    if let Some(bind) = args.bind {
        config.bind = bind;
    }
    config
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(data)?;
    runtime
        .block_on(finrag_service::serve(&config, |addr| {
            println!("listening on http://{addr}");
            let _ = std::io::stdout().flush();
        }))
        .map_err(data)
}

fn write_lines<T: Serialize>(w: &mut impl Write, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), Failure> {
    let config = SyntheticConfig {
        seed: args.seed,
        documents: args.documents,
        heldout_queries: args.heldout_queries,
        ..SyntheticConfig::default()
    };
    let corpus = SyntheticCorpus::generate(&config);
    std::fs::create_dir_all(&args.out).map_err(|e| at(&args.out)(&e))?;
    write_atomically(&args.out.join("corpus.jsonl"), |w| {
        write_jsonl_documents(w, &corpus.documents)
    })?;
    write_atomically(&args.out.join("train.jsonl"), |w| {
        write_lines(w, &corpus.training)
    })?;
    write_atomically(&args.out.join("judgments.jsonl"), |w| {
        write_lines(w, &corpus.judgments)
    })?;
    write_atomically(&args.out.join("holdout.jsonl"), |w| {
        write_lines(w, &corpus.holdout)
    })?;
    print_json(&json!({
        "documents": corpus.documents.len(),
        "chunk_limit": corpus.chunk_limit,
        "training_examples": corpus.training.len(),
        "judgments": corpus.judgments.len(),
        "holdout_pairs": corpus.holdout.len(),
    }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Eval(a) => eval(a),
        Command::Query(a) => query(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
        Err(Failure::Data(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}
