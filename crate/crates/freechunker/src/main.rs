//! FreeChunker command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 remote-service
//! error.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use freechunker::baselines::{semantic_chunk, traditional_chunk};
use freechunker::config::{config_load, Config, ConfigError};
use freechunker::embedders::{
    concat_teacher, mean_pool_teacher, EmbedderError, RemoteEmbedder, TextEmbedder,
};
use freechunker::encoder::EncoderWeights;
use freechunker::numerics::Matrix;
use freechunker::patterns::{
    build_explicit_patterns, build_sliding_patterns, ChunkPattern, PatternSet, StridePolicy,
};
use freechunker::pipeline::{
    load_corpus, run_pipeline, stride_policy, synth_eval, write_reports_text, CorpusRecord,
    EvalReport, Method, PipelineError, SynthEvalConfig,
};
use freechunker::retrieval::{assemble_context, ChunkIndex};
use freechunker::sentencizer::{split_sentences_with, Document, DEFAULT_ABBREVIATIONS};
use freechunker::theory::{monte_carlo_verify, BoundReport, GeometryConfig};
use freechunker::training::{train, TrainConfig, TrainDoc};
use freechunker::weights_io::{load_weights, save_weights};
use freechunker::F;

#[derive(Parser)]
#[command(name = "freechunker", version, about = "Cross-granularity chunking for retrieval")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, repeatable: --set key=value.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a corpus into sentences.
    Sentencize(SentencizeArgs),
    /// Chunk a corpus with one method and print the chunk layout.
    Chunk(ChunkArgs),
    /// Encode a corpus into chunk embeddings with trained weights.
    Encode(EncodeArgs),
    /// Distill an encoder against a teacher and save the weights.
    Train(TrainArgs),
    /// Build a retrieval index for a corpus.
    Index(IndexArgs),
    /// Query an index file.
    Query(QueryArgs),
    /// Run the synthetic needle-retrieval benchmark over all methods.
    Eval(EvalArgs),
    /// Monte Carlo verification of the substitution-loss bounds.
    VerifyTheory(VerifyTheoryArgs),
    /// Compare per-stage timings and embedder call counts across methods.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SentencizeArgs {
    /// Corpus JSONL ({"id","text"} per line).
    #[arg(long)]
    input: PathBuf,
    /// Output JSONL; "-" for stdout.
    #[arg(long, default_value = "-")]
    output: String,
    /// File with one abbreviation per line, replacing the built-in list.
    #[arg(long)]
    abbreviations: Option<PathBuf>,
}

#[derive(Args)]
struct ChunkArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    method: String,
    /// Pattern spec "g1,g2,...[:stride]" or explicit JSON index sets
    /// (freechunk only).
    #[arg(long)]
    patterns: Option<String>,
    #[arg(long, default_value = "-")]
    output: String,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Weight container produced by `train`.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    patterns: Option<String>,
    #[arg(long, default_value = "-")]
    output: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    input: PathBuf,
    /// "mean-pool" or "remote".
    #[arg(long, default_value = "mean-pool")]
    teacher: String,
    #[arg(long)]
    output_weights: PathBuf,
    /// Loss-history CSV (step, train_loss, val_loss).
    #[arg(long)]
    history: Option<PathBuf>,
    /// Fraction of documents held out for validation.
    #[arg(long, default_value_t = 0.1)]
    holdout: f64,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "freechunk")]
    method: String,
    /// Optional trained weights (freechunk); random init otherwise.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value = "-")]
    output: String,
    /// Also print stage timings to stderr.
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    /// Query text, embedded with the configured embedder.
    #[arg(long)]
    text: String,
    #[arg(short, long, default_value_t = 10)]
    k: usize,
    /// Corpus JSONL; when given, assembles budgeted context from the hits.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "-")]
    output: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value_t = 40)]
    docs: usize,
    #[arg(long, default_value_t = 24)]
    sentences_per_doc: usize,
    #[arg(long, default_value_t = 100)]
    queries: usize,
    #[arg(long, default_value_t = 4)]
    needle_granularity: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV report path.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value = "-")]
    output: String,
}

#[derive(Args)]
struct VerifyTheoryArgs {
    /// Comma-separated grid values used for both s and rho.
    #[arg(long, default_value = "0,0.25,0.5,0.75,0.9,0.99")]
    grid: String,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value = "-")]
    output: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "-")]
    output: String,
}

/// Failure with a process exit code attached.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(_) => CliError::data(e.to_string()),
            _ => CliError::usage(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

impl From<EmbedderError> for CliError {
    fn from(e: EmbedderError) -> Self {
        CliError::from(PipelineError::from(e))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(format!("i/o: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successes; everything else is a usage error.
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut flag_overrides = Vec::new();
    for pair in &cli.overrides {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects key=value, got {pair:?}")))?;
        flag_overrides.push((key.to_string(), value.to_string()));
    }
    let cfg = config_load(cli.config.as_deref(), std::env::vars(), &flag_overrides)?;

    match cli.command {
        Command::Sentencize(args) => cmd_sentencize(args),
        Command::Chunk(args) => cmd_chunk(args, &cfg),
        Command::Encode(args) => cmd_encode(args, &cfg),
        Command::Train(args) => cmd_train(args, &cfg),
        Command::Index(args) => cmd_index(args, &cfg),
        Command::Query(args) => cmd_query(args, &cfg),
        Command::Eval(args) => cmd_eval(args, &cfg),
        Command::VerifyTheory(args) => cmd_verify_theory(args),
        Command::Bench(args) => cmd_bench(args, &cfg),
    }
}

fn open_output(path: &str) -> Result<Box<dyn Write>, CliError> {
    if path == "-" {
        Ok(Box::new(BufWriter::new(std::io::stdout())))
    } else {
        Ok(Box::new(BufWriter::new(File::create(path)?)))
    }
}

fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    Ok(load_corpus(BufReader::new(file))?)
}

fn parse_method(name: &str) -> Result<Method, CliError> {
    name.parse::<Method>().map_err(|e| CliError::usage(e.to_string()))
}

/// "g1,g2,...[:stride]" or an explicit JSON array of index sets.
enum PatternSpec {
    Sliding { granularities: Vec<usize>, stride: Option<usize> },
    Explicit(Vec<Vec<usize>>),
}

fn parse_pattern_spec(spec: &str) -> Result<PatternSpec, CliError> {
    let spec = spec.trim();
    if spec.starts_with('[') {
        let sets: Vec<Vec<usize>> = serde_json::from_str(spec)
            .map_err(|e| CliError::usage(format!("bad explicit pattern JSON: {e}")))?;
        return Ok(PatternSpec::Explicit(sets));
    }
    let (gs, stride) = match spec.split_once(':') {
        Some((gs, stride)) => {
            let stride = stride.trim().parse::<usize>().map_err(|_| {
                CliError::usage(format!("bad stride {stride:?} in pattern spec"))
            })?;
            (gs, Some(stride))
        }
        None => (spec, None),
    };
    let granularities = gs
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::usage(format!("bad granularity {p:?} in pattern spec")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PatternSpec::Sliding { granularities, stride })
}

fn patterns_for(
    n: usize,
    spec: Option<&str>,
    cfg: &Config,
) -> Result<PatternSet, CliError> {
    let ps = match spec {
        None => build_sliding_patterns(n, &cfg.granularities, stride_policy(cfg)),
        Some(raw) => match parse_pattern_spec(raw)? {
            PatternSpec::Sliding { granularities, stride } => {
                let policy = match stride {
                    None => stride_policy(cfg),
                    Some(0) => StridePolicy::EqualsGranularity,
                    Some(s) => StridePolicy::Fixed(s),
                };
                build_sliding_patterns(n, &granularities, policy)
            }
            PatternSpec::Explicit(sets) => build_explicit_patterns(n, &sets),
        },
    };
    ps.map_err(|e| CliError::data(e.to_string()))
}

fn make_embedder(cfg: &Config) -> Result<Box<dyn TextEmbedder>, CliError> {
    freechunker::pipeline::build_embedder(cfg).map_err(CliError::from)
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SentenceRecord<'a> {
    doc_id: &'a str,
    index: usize,
    text: &'a str,
    token_count: usize,
}

fn cmd_sentencize(args: SentencizeArgs) -> Result<(), CliError> {
    let corpus = read_corpus(&args.input)?;
    let custom: Option<Vec<String>> = match &args.abbreviations {
        Some(path) => {
            let file = File::open(path)
                .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
            let mut list = Vec::new();
            for line in BufReader::new(file).lines() {
                let line = line?;
                let trimmed = line.trim().trim_end_matches('.').to_lowercase();
                if !trimmed.is_empty() {
                    list.push(trimmed);
                }
            }
            Some(list)
        }
        None => None,
    };
    let abbrevs: Vec<&str> = match &custom {
        Some(list) => list.iter().map(|s| s.as_str()).collect(),
        None => DEFAULT_ABBREVIATIONS.to_vec(),
    };
    let mut out = open_output(&args.output)?;
    for rec in &corpus {
        for sentence in split_sentences_with(&rec.text, &abbrevs) {
            let row = SentenceRecord {
                doc_id: &rec.id,
                index: sentence.index,
                text: &sentence.text,
                token_count: sentence.token_count,
            };
            serde_json::to_writer(&mut out, &row)
                .map_err(|e| CliError::data(e.to_string()))?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PatternRow<'a> {
    doc_id: &'a str,
    indices: &'a [usize],
    g: usize,
    s: usize,
}

fn cmd_chunk(args: ChunkArgs, cfg: &Config) -> Result<(), CliError> {
    let method = parse_method(&args.method)?;
    let corpus = read_corpus(&args.input)?;
    let embedder = make_embedder(cfg)?;
    let mut out = open_output(&args.output)?;
    for rec in &corpus {
        let doc = Document::new(rec.id.clone(), rec.text.clone());
        if doc.sentences.is_empty() {
            continue;
        }
        match method {
            Method::Traditional | Method::Semantic => {
                let chunks = if method == Method::Traditional {
                    traditional_chunk(&doc, cfg.token_limit)
                } else {
                    semantic_chunk(&doc, embedder.as_ref(), cfg.percentile)?
                };
                for c in chunks {
                    serde_json::to_writer(&mut out, &c)
                        .map_err(|e| CliError::data(e.to_string()))?;
                    out.write_all(b"\n")?;
                }
            }
            Method::FreeChunk => {
                let ps = patterns_for(doc.sentences.len(), args.patterns.as_deref(), cfg)?;
                for p in &ps.patterns {
                    let row = PatternRow {
                        doc_id: &doc.id,
                        indices: &p.sentence_indices,
                        g: p.granularity,
                        s: p.start,
                    };
                    serde_json::to_writer(&mut out, &row)
                        .map_err(|e| CliError::data(e.to_string()))?;
                    out.write_all(b"\n")?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn load_weights_file(path: &Path) -> Result<EncoderWeights<F>, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    load_weights(BufReader::new(file)).map_err(|e| CliError::data(e.to_string()))
}

fn cmd_encode(args: EncodeArgs, cfg: &Config) -> Result<(), CliError> {
    let weights = load_weights_file(&args.weights)?;
    let corpus = read_corpus(&args.input)?;
    let embedder = make_embedder(cfg)?;
    let mut index = ChunkIndex::new();
    for rec in &corpus {
        let doc = Document::new(rec.id.clone(), rec.text.clone());
        if doc.sentences.is_empty() {
            continue;
        }
        let ps = patterns_for(doc.sentences.len(), args.patterns.as_deref(), cfg)?;
        let records = encode_document(&doc, &ps, &weights, embedder.as_ref())?;
        index
            .add_chunks(records)
            .map_err(|e| CliError::data(format!("document {}: {e}", doc.id)))?;
    }
    let mut out = open_output(&args.output)?;
    index
        .save_jsonl(&mut out)
        .map_err(|e| CliError::data(e.to_string()))?;
    out.flush()?;
    Ok(())
}

fn encode_document(
    doc: &Document,
    ps: &PatternSet,
    weights: &EncoderWeights<F>,
    embedder: &dyn TextEmbedder,
) -> Result<Vec<freechunker::retrieval::ChunkRecord>, CliError> {
    let texts: Vec<&str> = doc.sentences.iter().map(|s| s.text.as_str()).collect();
    let rows: Vec<Vec<F>> = embedder
        .embed_batch(&texts)?
        .into_iter()
        .map(|v| v.values)
        .collect();
    let e = Matrix::from_rows(&rows);
    let mask = freechunker::patterns::pattern_to_mask(ps);
    let emb = freechunker::encoder::forward(weights, &e, &mask)
        .map_err(|e| CliError::data(format!("document {}: {e}", doc.id)))?;
    Ok(ps
        .patterns
        .iter()
        .enumerate()
        .map(|(i, p)| {
            freechunker::retrieval::ChunkRecord::new(
                &doc.id,
                p.sentence_indices.clone(),
                emb.matrix.row(i).to_vec(),
            )
        })
        .collect())
}

fn cmd_train(args: TrainArgs, cfg: &Config) -> Result<(), CliError> {
    let corpus = read_corpus(&args.input)?;
    let embedder = make_embedder(cfg)?;
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        base_lr: cfg.base_lr,
        warmup_fraction: cfg.warmup_fraction,
        granularities: cfg.granularities.clone(),
        validation_interval: cfg.validation_interval,
        seed: cfg.seed,
        embedding_dim: cfg.d,
        num_layers: cfg.layers,
        weight_decay: cfg.weight_decay,
        ..TrainConfig::default()
    };

    let mut docs: Vec<TrainDoc<F>> = Vec::new();
    let mut doc_texts: Vec<Vec<String>> = Vec::new();
    for rec in &corpus {
        let doc = Document::new(rec.id.clone(), rec.text.clone());
        if doc.sentences.is_empty() {
            continue;
        }
        let texts: Vec<&str> = doc.sentences.iter().map(|s| s.text.as_str()).collect();
        let rows: Vec<Vec<F>> = embedder
            .embed_batch(&texts)?
            .into_iter()
            .map(|v| v.values)
            .collect();
        let ps = build_sliding_patterns(
            doc.sentences.len(),
            &train_cfg.granularities,
            stride_policy(cfg),
        )
        .map_err(|e| CliError::data(e.to_string()))?;
        docs.push(TrainDoc {
            e: Matrix::from_rows(&rows),
            pattern_set: ps,
        });
        doc_texts.push(texts.iter().map(|t| t.to_string()).collect());
    }
    if docs.is_empty() {
        return Err(CliError::data("training corpus has no sentences"));
    }

    let holdout = ((docs.len() as f64 * args.holdout).round() as usize).min(docs.len() - 1);
    let split = docs.len() - holdout;
    let (train_docs, val_docs) = docs.split_at(split);

    // Remote teacher embeddings are precomputed per (document, pattern) and
    // looked up by the E matrix's buffer address inside the training closure.
    type TeacherTable = HashMap<(usize, Vec<usize>), Vec<F>>;
    let remote_teachers: Option<TeacherTable> =
        match args.teacher.as_str() {
            "mean-pool" => None,
            "remote" => {
                let remote = RemoteEmbedder::new(cfg.remote.clone())?;
                let mut map = HashMap::new();
                for (doc, texts) in docs.iter().zip(&doc_texts) {
                    let refs: Vec<&str> = texts.iter().map(|t| t.as_str()).collect();
                    let key = doc.e.data.as_ptr() as usize;
                    for p in &doc.pattern_set.patterns {
                        let t = concat_teacher(&refs, p, &remote)?;
                        map.insert((key, p.sentence_indices.clone()), t.values);
                    }
                }
                Some(map)
            }
            other => {
                return Err(CliError::usage(format!(
                    "unknown teacher {other:?} (expected mean-pool|remote)"
                )))
            }
        };
    let teacher = move |e: &Matrix<F>, p: &ChunkPattern| -> Vec<F> {
        match &remote_teachers {
            None => mean_pool_teacher(e, p),
            Some(map) => map[&(e.data.as_ptr() as usize, p.sentence_indices.clone())].clone(),
        }
    };

    let (weights, history) =
        train(train_docs, val_docs, &teacher, &train_cfg).map_err(|e| CliError::data(e.to_string()))?;

    let mut wf = BufWriter::new(File::create(&args.output_weights)?);
    save_weights(&weights, &mut wf).map_err(|e| CliError::data(e.to_string()))?;
    wf.flush()?;

    if let Some(path) = &args.history {
        let mut hf = BufWriter::new(File::create(path)?);
        writeln!(hf, "step,train_loss,val_loss")?;
        for rec in &history {
            let val = rec
                .val_loss
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default();
            writeln!(hf, "{},{:.6},{}", rec.step, rec.train_loss, val)?;
        }
        hf.flush()?;
    }
    if let Some(last) = history.last() {
        eprintln!(
            "trained {} steps, final train loss {:.4}",
            last.step, last.train_loss
        );
    }
    Ok(())
}

fn cmd_index(args: IndexArgs, cfg: &Config) -> Result<(), CliError> {
    let method = parse_method(&args.method)?;
    let corpus = read_corpus(&args.input)?;
    let weights = match &args.weights {
        Some(path) => Some(load_weights_file(path)?),
        None => None,
    };
    let output = run_pipeline(&corpus, method, cfg, weights.as_ref())?;
    if args.timings {
        eprintln!(
            "sentencize {:.4}s  chunk {:.4}s  embed {:.4}s  encode {:.4}s  total {:.4}s  embed-calls {}",
            output.timings.sentencize_secs,
            output.timings.chunk_secs,
            output.timings.embed_secs,
            output.timings.encode_secs,
            output.timings.total_secs,
            output.sentence_encoding_calls,
        );
    }
    let mut out = open_output(&args.output)?;
    output
        .index
        .save_jsonl(&mut out)
        .map_err(|e| CliError::data(e.to_string()))?;
    out.flush()?;
    Ok(())
}

fn cmd_query(args: QueryArgs, cfg: &Config) -> Result<(), CliError> {
    if args.k == 0 {
        return Err(CliError::usage("k must be >= 1"));
    }
    let file = File::open(&args.index)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", args.index.display())))?;
    let index =
        ChunkIndex::load_jsonl(BufReader::new(file)).map_err(|e| CliError::data(e.to_string()))?;
    let embedder = make_embedder(cfg)?;
    let query = embedder.embed(&args.text)?;
    let hits = index
        .query_top_k(&query.values, args.k)
        .map_err(|e| CliError::data(e.to_string()))?;

    let mut out = open_output(&args.output)?;
    for hit in &hits {
        serde_json::to_writer(&mut out, hit).map_err(|e| CliError::data(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    if let Some(corpus_path) = &args.corpus {
        let corpus = read_corpus(corpus_path)?;
        let docs: HashMap<String, Document> = corpus
            .iter()
            .map(|r| (r.id.clone(), Document::new(r.id.clone(), r.text.clone())))
            .collect();
        let ctx = assemble_context(&hits, &docs, cfg.token_budget);
        serde_json::to_writer(&mut out, &ctx).map_err(|e| CliError::data(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_eval(args: EvalArgs, cfg: &Config) -> Result<(), CliError> {
    if args.docs == 0 || args.sentences_per_doc == 0 || args.needle_granularity == 0 {
        return Err(CliError::usage(
            "docs, sentences-per-doc and needle-granularity must be >= 1",
        ));
    }
    let gen = SynthEvalConfig {
        docs: args.docs,
        sentences_per_doc: args.sentences_per_doc,
        queries: args.queries,
        needle_granularity: args.needle_granularity,
        seed: args.seed,
    };
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        base_lr: cfg.base_lr,
        warmup_fraction: cfg.warmup_fraction,
        granularities: cfg.granularities.clone(),
        validation_interval: 0,
        seed: cfg.seed,
        embedding_dim: cfg.d,
        num_layers: cfg.layers,
        weight_decay: cfg.weight_decay,
        ..TrainConfig::default()
    };
    let reports = synth_eval(&gen, cfg, &train_cfg)?;
    let mut out = open_output(&args.output)?;
    write_reports_text(&reports, &mut out)?;
    out.flush()?;
    if let Some(path) = &args.csv {
        write_eval_csv(&reports, path)?;
    }
    Ok(())
}

fn write_eval_csv(reports: &[EvalReport], path: &Path) -> Result<(), CliError> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{}", EvalReport::csv_header())?;
    for r in reports {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()?;
    Ok(())
}

fn cmd_verify_theory(args: VerifyTheoryArgs) -> Result<(), CliError> {
    let grid: Vec<f64> = args
        .grid
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| CliError::usage(format!("bad grid value {p:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if args.trials == 0 {
        return Err(CliError::usage("trials must be >= 1"));
    }
    let mut reports = Vec::new();
    for &s in &grid {
        for &rho in &grid {
            let cfg = GeometryConfig::new(s, rho, args.trials, args.seed);
            let report = monte_carlo_verify(&cfg).map_err(|e| CliError::data(e.to_string()))?;
            reports.push(report);
        }
    }
    let mut out = open_output(&args.output)?;
    writeln!(
        out,
        "{:>5} {:>5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>6}",
        "s", "rho", "max_eps", "mean_eps", "wc_bound", "exp_bound", "|cosphi|", "viol"
    )?;
    for r in &reports {
        writeln!(
            out,
            "{:>5.2} {:>5.2} {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>10.4} {:>6}",
            r.s,
            r.rho,
            r.max_observed,
            r.mean_observed,
            r.worst_case_bound,
            r.expected_bound,
            r.mean_abs_cos_phi,
            r.violations
        )?;
    }
    let total_violations: usize = reports.iter().map(|r| r.violations).sum();
    writeln!(out, "total violations: {total_violations}")?;
    out.flush()?;
    if let Some(path) = &args.csv {
        write_theory_csv(&reports, path)?;
    }
    if total_violations > 0 {
        return Err(CliError::data(format!(
            "{total_violations} trials violated the worst-case bound"
        )));
    }
    Ok(())
}

fn write_theory_csv(reports: &[BoundReport], path: &Path) -> Result<(), CliError> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(
        f,
        "s,rho,trials,max_observed,mean_observed,std_observed,worst_case_bound,expected_bound,violations,mean_abs_cos_phi"
    )?;
    for r in reports {
        writeln!(
            f,
            "{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{},{:.6}",
            r.s,
            r.rho,
            r.trials,
            r.max_observed,
            r.mean_observed,
            r.std_observed,
            r.worst_case_bound,
            r.expected_bound,
            r.violations,
            r.mean_abs_cos_phi
        )?;
    }
    f.flush()?;
    Ok(())
}

fn cmd_bench(args: BenchArgs, cfg: &Config) -> Result<(), CliError> {
    let corpus = read_corpus(&args.input)?;
    let mut out = open_output(&args.output)?;
    writeln!(
        out,
        "{:<12} {:>10} {:>10} {:>10} {:>10} {:>12} {:>8}",
        "method", "chunk_s", "embed_s", "encode_s", "total_s", "embed-calls", "chunks"
    )?;
    for method in [Method::Traditional, Method::Semantic, Method::FreeChunk] {
        let output = run_pipeline(&corpus, method, cfg, None)?;
        writeln!(
            out,
            "{:<12} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>12} {:>8}",
            method.name(),
            output.timings.chunk_secs,
            output.timings.embed_secs,
            output.timings.encode_secs,
            output.timings.total_secs,
            output.sentence_encoding_calls,
            output.chunk_count,
        )?;
    }
    // Cost of re-encoding every chunk from scratch, for comparison with the
    // sentence-reuse numbers above.
    let mut reencode_total = 0usize;
    for rec in &corpus {
        let doc = Document::new(rec.id.clone(), rec.text.clone());
        if doc.sentences.is_empty() {
            continue;
        }
        let ps = build_sliding_patterns(
            doc.sentences.len(),
            &cfg.granularities,
            stride_policy(cfg),
        )
        .map_err(|e| CliError::data(e.to_string()))?;
        reencode_total += ps.reencoding_sentence_equivalents();
    }
    writeln!(
        out,
        "per-chunk re-encoding would cost {reencode_total} sentence embeddings"
    )?;
    out.flush()?;
    Ok(())
}
