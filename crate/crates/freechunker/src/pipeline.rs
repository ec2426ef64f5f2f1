//! End-to-end pipeline: corpus I/O, per-method index construction with stage
//! timings, and the synthetic needle-retrieval evaluation harness.

use std::io::{BufRead, Write};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{semantic_chunk, traditional_chunk};
use crate::config::Config;
use crate::embedders::{
    mean_pool_teacher, CountingEmbedder, EmbedderError, RemoteEmbedder, TextEmbedder, ToyEmbedder,
};
use crate::encoder::{forward, EncoderError, EncoderWeights};
use crate::numerics::Matrix;
use crate::patterns::{build_sliding_patterns, pattern_to_mask, PatternError, StridePolicy};
use crate::retrieval::{ChunkIndex, ChunkRecord, RetrievalError};
use crate::sentencizer::Document;
use crate::training::{train, TrainConfig, TrainDoc, TrainingError};
use crate::F;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus parse error at line {line}: {message}")]
    CorpusParse { line: usize, message: String },
    #[error("document {doc_id}: {source}")]
    Document {
        doc_id: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Embedder(#[from] EmbedderError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error("unknown method {0:?} (expected traditional|semantic|freechunk)")]
    UnknownMethod(String),
    #[error("unknown embedder {0:?} (expected toy|remote)")]
    UnknownEmbedder(String),
}

impl PipelineError {
    /// Process exit code: 1 usage, 2 data, 3 remote service.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::UnknownMethod(_) | PipelineError::UnknownEmbedder(_) => 1,
            PipelineError::Embedder(
                EmbedderError::RemoteRejected { .. }
                | EmbedderError::RemoteUnavailable { .. }
                | EmbedderError::MissingApiKey(_),
            ) => 3,
            PipelineError::Document { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
}

pub fn load_corpus<R: BufRead>(reader: R) -> Result<Vec<CorpusRecord>, PipelineError> {
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| PipelineError::CorpusParse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if !seen.insert(rec.id.clone()) {
            return Err(PipelineError::CorpusParse {
                line: lineno + 1,
                message: format!("duplicate document id {:?}", rec.id),
            });
        }
        records.push(rec);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Traditional,
    Semantic,
    FreeChunk,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Traditional => "traditional",
            Method::Semantic => "semantic",
            Method::FreeChunk => "freechunk",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "traditional" => Ok(Method::Traditional),
            "semantic" => Ok(Method::Semantic),
            "freechunk" => Ok(Method::FreeChunk),
            other => Err(PipelineError::UnknownMethod(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StageTimings {
    pub sentencize_secs: f64,
    pub chunk_secs: f64,
    pub embed_secs: f64,
    pub encode_secs: f64,
    pub total_secs: f64,
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub index: ChunkIndex,
    pub documents: Vec<Document>,
    pub timings: StageTimings,
    /// Base-embedder text calls made while indexing.
    pub sentence_encoding_calls: usize,
    pub chunk_count: usize,
}

/// Construct the base text embedder named by the config.
pub fn build_embedder(cfg: &Config) -> Result<Box<dyn TextEmbedder>, PipelineError> {
    match cfg.embedder.as_str() {
        "toy" => Ok(Box::new(ToyEmbedder {
            d: cfg.d,
            seed: cfg.seed,
        })),
        "remote" => Ok(Box::new(RemoteEmbedder::new(cfg.remote.clone())?)),
        other => Err(PipelineError::UnknownEmbedder(other.to_string())),
    }
}

pub fn stride_policy(cfg: &Config) -> StridePolicy {
    if cfg.stride == 0 {
        StridePolicy::EqualsGranularity
    } else {
        StridePolicy::Fixed(cfg.stride)
    }
}

/// Sentencize, chunk, embed and (for freechunk) run the encoder forward,
/// producing an index plus stage timings.
pub fn run_pipeline(
    corpus: &[CorpusRecord],
    method: Method,
    cfg: &Config,
    weights: Option<&EncoderWeights<F>>,
) -> Result<PipelineOutput, PipelineError> {
    let start = Instant::now();
    let embedder = CountingEmbedder::new(build_embedder(cfg)?);
    let default_weights;
    let weights = match weights {
        Some(w) => w,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            default_weights = EncoderWeights::init_random(cfg.d, cfg.layers, &mut rng);
            &default_weights
        }
    };

    let mut timings = StageTimings::default();
    let mut index = ChunkIndex::new();
    let mut documents = Vec::new();

    for rec in corpus {
        let t0 = Instant::now();
        let doc = Document::new(rec.id.clone(), rec.text.clone());
        timings.sentencize_secs += t0.elapsed().as_secs_f64();
        if doc.sentences.is_empty() {
            documents.push(doc);
            continue;
        }
        let records = match method {
            Method::Traditional => {
                let t = Instant::now();
                let chunks = traditional_chunk(&doc, cfg.token_limit);
                timings.chunk_secs += t.elapsed().as_secs_f64();
                let t = Instant::now();
                let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
                let embeddings = embedder.embed_batch(&texts)?;
                timings.embed_secs += t.elapsed().as_secs_f64();
                chunks
                    .iter()
                    .zip(embeddings)
                    .map(|(c, e)| {
                        ChunkRecord::new(&doc.id, (c.first..=c.last).collect(), e.values)
                    })
                    .collect::<Vec<_>>()
            }
            Method::Semantic => {
                let t = Instant::now();
                let chunks = semantic_chunk(&doc, &embedder, cfg.percentile)?;
                timings.chunk_secs += t.elapsed().as_secs_f64();
                let t = Instant::now();
                let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
                let embeddings = embedder.embed_batch(&texts)?;
                timings.embed_secs += t.elapsed().as_secs_f64();
                chunks
                    .iter()
                    .zip(embeddings)
                    .map(|(c, e)| {
                        ChunkRecord::new(&doc.id, (c.first..=c.last).collect(), e.values)
                    })
                    .collect::<Vec<_>>()
            }
            Method::FreeChunk => {
                let t = Instant::now();
                let ps = build_sliding_patterns(
                    doc.sentences.len(),
                    &cfg.granularities,
                    stride_policy(cfg),
                )?;
                let mask = pattern_to_mask(&ps);
                timings.chunk_secs += t.elapsed().as_secs_f64();

                // Each sentence is embedded exactly once, whatever the
                // pattern count.
                let t = Instant::now();
                let texts: Vec<&str> = doc.sentences.iter().map(|s| s.text.as_str()).collect();
                let sentence_embeddings = embedder.embed_batch(&texts)?;
                let e = Matrix::from_rows(
                    &sentence_embeddings
                        .iter()
                        .map(|v| v.values.clone())
                        .collect::<Vec<_>>(),
                );
                timings.embed_secs += t.elapsed().as_secs_f64();

                let t = Instant::now();
                let chunk_embeddings = forward(weights, &e, &mask)?;
                timings.encode_secs += t.elapsed().as_secs_f64();

                ps.patterns
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        ChunkRecord::new(
                            &doc.id,
                            p.sentence_indices.clone(),
                            chunk_embeddings.matrix.row(i).to_vec(),
                        )
                    })
                    .collect()
            }
        };
        index.add_chunks(records).map_err(|e| PipelineError::Document {
            doc_id: doc.id.clone(),
            source: Box::new(PipelineError::Retrieval(e)),
        })?;
        documents.push(doc);
    }

    timings.total_secs = start.elapsed().as_secs_f64();
    Ok(PipelineOutput {
        chunk_count: index.len(),
        sentence_encoding_calls: embedder.calls(),
        index,
        documents,
        timings,
    })
}

// ---------------------------------------------------------------------------
// Synthetic evaluation harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthEvalConfig {
    pub docs: usize,
    pub sentences_per_doc: usize,
    pub queries: usize,
    pub needle_granularity: usize,
    pub seed: u64,
}

impl Default for SynthEvalConfig {
    fn default() -> Self {
        SynthEvalConfig {
            docs: 40,
            sentences_per_doc: 24,
            queries: 100,
            needle_granularity: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub queries: usize,
    pub hit_at_1: f64,
    pub hit_at_5: f64,
    pub hit_at_10: f64,
    pub mrr: f64,
    pub chunk_secs: f64,
    pub embed_secs: f64,
    pub encode_secs: f64,
    pub sentence_encoding_calls: usize,
    pub chunk_count: usize,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "method,queries,hit_at_1,hit_at_5,hit_at_10,mrr,chunk_secs,embed_secs,encode_secs,sentence_encoding_calls,chunk_count"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.6},{:.6},{:.6},{},{}",
            self.method,
            self.queries,
            self.hit_at_1,
            self.hit_at_5,
            self.hit_at_10,
            self.mrr,
            self.chunk_secs,
            self.embed_secs,
            self.encode_secs,
            self.sentence_encoding_calls,
            self.chunk_count
        )
    }
}

/// Distinct pseudo-words keep toy sentence embeddings spread out.
pub fn generate_synthetic_corpus(
    docs: usize,
    sentences_per_doc: usize,
    seed: u64,
) -> Vec<CorpusRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..docs)
        .map(|doc_idx| {
            let text: String = (0..sentences_per_doc)
                .map(|s| {
                    let a: u32 = rng.gen_range(0..100_000);
                    let b: u32 = rng.gen_range(0..100_000);
                    format!("Doc{doc_idx} sentence{s} covers topic{a} and detail{b}. ")
                })
                .collect();
            CorpusRecord {
                id: format!("doc-{doc_idx}"),
                text: text.trim_end().to_string(),
            }
        })
        .collect()
}

struct NeedleQuery {
    doc_id: String,
    span: Vec<usize>,
    embedding: Vec<F>,
}

/// Queries are the mean-pool teacher embedding of a planted sentence span.
fn build_queries(
    documents: &[Document],
    gen: &SynthEvalConfig,
    cfg: &Config,
) -> Vec<NeedleQuery> {
    let mut rng = ChaCha8Rng::seed_from_u64(gen.seed.wrapping_add(0x9e37));
    let embedder = ToyEmbedder {
        d: cfg.d,
        seed: cfg.seed,
    };
    let eligible: Vec<&Document> = documents
        .iter()
        .filter(|d| d.sentences.len() >= gen.needle_granularity)
        .collect();
    (0..gen.queries)
        .map(|_| {
            let doc = eligible[rng.gen_range(0..eligible.len())];
            let start = rng.gen_range(0..=doc.sentences.len() - gen.needle_granularity);
            let span: Vec<usize> = (start..start + gen.needle_granularity).collect();
            let rows: Vec<Vec<F>> = span
                .iter()
                .map(|&i| embedder.embed(&doc.sentences[i].text).unwrap().values)
                .collect();
            let e = Matrix::from_rows(&rows);
            // The rows of `e` are already just the span, so pool over all of
            // them.
            let local = crate::patterns::ChunkPattern::new((0..span.len()).collect());
            let embedding = mean_pool_teacher(&e, &local);
            NeedleQuery {
                doc_id: doc.id.clone(),
                span,
                embedding,
            }
        })
        .collect()
}

fn score_method(
    output: &PipelineOutput,
    queries: &[NeedleQuery],
    method: Method,
) -> EvalReport {
    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    let mut hits10 = 0usize;
    let mut mrr_sum = 0.0f64;
    for q in queries {
        let hits = output
            .index
            .query_top_k(&q.embedding, 10)
            .expect("non-empty index");
        let first_rank = hits.iter().position(|h| {
            h.record.doc_id == q.doc_id
                && h.record.indices.iter().any(|i| q.span.contains(i))
        });
        if let Some(rank) = first_rank {
            if rank < 1 {
                hits1 += 1;
            }
            if rank < 5 {
                hits5 += 1;
            }
            if rank < 10 {
                hits10 += 1;
            }
            mrr_sum += 1.0 / (rank + 1) as f64;
        }
    }
    let n = queries.len().max(1) as f64;
    EvalReport {
        method: method.name().to_string(),
        queries: queries.len(),
        hit_at_1: hits1 as f64 / n,
        hit_at_5: hits5 as f64 / n,
        hit_at_10: hits10 as f64 / n,
        mrr: mrr_sum / n,
        chunk_secs: output.timings.chunk_secs,
        embed_secs: output.timings.embed_secs,
        encode_secs: output.timings.encode_secs,
        sentence_encoding_calls: output.sentence_encoding_calls,
        chunk_count: output.chunk_count,
    }
}

/// Distill an encoder on the corpus itself with the mean-pool teacher, then
/// index. Returns the trained weights for reuse.
pub fn train_eval_encoder(
    documents: &[Document],
    cfg: &Config,
    train_cfg: &TrainConfig,
) -> Result<EncoderWeights<F>, PipelineError> {
    let embedder = ToyEmbedder {
        d: cfg.d,
        seed: cfg.seed,
    };
    let docs: Vec<TrainDoc<F>> = documents
        .iter()
        .filter(|d| !d.sentences.is_empty())
        .map(|d| {
            let texts: Vec<&str> = d.sentences.iter().map(|s| s.text.as_str()).collect();
            let rows: Vec<Vec<F>> = embedder
                .embed_batch(&texts)?
                .into_iter()
                .map(|v| v.values)
                .collect();
            let ps = build_sliding_patterns(
                d.sentences.len(),
                &train_cfg.granularities,
                stride_policy(cfg),
            )?;
            Ok(TrainDoc {
                e: Matrix::from_rows(&rows),
                pattern_set: ps,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    let teacher = |e: &Matrix<F>, p: &crate::patterns::ChunkPattern| mean_pool_teacher(e, p);
    let (weights, _history) = train(&docs, &[], &teacher, train_cfg)?;
    Ok(weights)
}

/// Run the needle benchmark for every method and return one report each
/// (traditional, semantic, freechunk). The freechunk encoder is distilled on
/// the synthetic corpus first.
pub fn synth_eval(
    gen: &SynthEvalConfig,
    cfg: &Config,
    train_cfg: &TrainConfig,
) -> Result<Vec<EvalReport>, PipelineError> {
    let corpus = generate_synthetic_corpus(gen.docs, gen.sentences_per_doc, gen.seed);
    if gen.queries == 0 {
        return Ok(Vec::new());
    }
    let documents: Vec<Document> = corpus
        .iter()
        .map(|r| Document::new(r.id.clone(), r.text.clone()))
        .collect();
    let queries = build_queries(&documents, gen, cfg);

    let mut reports = Vec::new();
    for method in [Method::Traditional, Method::Semantic, Method::FreeChunk] {
        let weights = if method == Method::FreeChunk {
            Some(train_eval_encoder(&documents, cfg, train_cfg)?)
        } else {
            None
        };
        let output = run_pipeline(&corpus, method, cfg, weights.as_ref())?;
        reports.push(score_method(&output, &queries, method));
    }
    Ok(reports)
}

pub fn write_reports_text<W: Write>(reports: &[EvalReport], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "# Retrieval metric: span-overlap hits on planted needles (no generator in the loop)."
    )?;
    writeln!(
        out,
        "{:<12} {:>7} {:>7} {:>8} {:>7} {:>12} {:>10}",
        "method", "hit@1", "hit@5", "hit@10", "mrr", "embed-calls", "chunks"
    )?;
    for r in reports {
        writeln!(
            out,
            "{:<12} {:>7.3} {:>7.3} {:>8.3} {:>7.3} {:>12} {:>10}",
            r.method, r.hit_at_1, r.hit_at_5, r.hit_at_10, r.mrr, r.sentence_encoding_calls, r.chunk_count
        )?;
    }
    Ok(())
}
