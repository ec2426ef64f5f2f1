//! Reference chunkers: fixed-token accumulation ("traditional") and
//! percentile-breakpoint semantic chunking.

use serde::Serialize;

use crate::embedders::{EmbedderError, TextEmbedder};
use crate::sentencizer::Document;

pub const DEFAULT_TOKEN_LIMIT: usize = 256;
pub const DEFAULT_PERCENTILE: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Chunk {
    pub doc_id: String,
    /// Inclusive sentence index range.
    pub first: usize,
    pub last: usize,
    pub text: String,
    pub token_count: usize,
}

fn make_chunk(doc: &Document, first: usize, last: usize) -> Chunk {
    let start = doc.sentences[first].byte_span.0;
    let end = doc.sentences[last].byte_span.1;
    Chunk {
        doc_id: doc.id.clone(),
        first,
        last,
        text: doc.text[start..end].to_string(),
        token_count: doc.sentences[first..=last]
            .iter()
            .map(|s| s.token_count)
            .sum(),
    }
}

/// Greedy accumulation: a chunk closes before a sentence that would push its
/// token total over the limit; a single oversize sentence forms its own
/// chunk.
pub fn traditional_chunk(doc: &Document, token_limit: usize) -> Vec<Chunk> {
    assert!(token_limit >= 1);
    let mut chunks = Vec::new();
    let mut first: Option<usize> = None;
    let mut running = 0usize;
    for (i, sentence) in doc.sentences.iter().enumerate() {
        match first {
            None => {
                first = Some(i);
                running = sentence.token_count;
            }
            Some(f) => {
                if running + sentence.token_count > token_limit {
                    chunks.push(make_chunk(doc, f, i - 1));
                    first = Some(i);
                    running = sentence.token_count;
                } else {
                    running += sentence.token_count;
                }
            }
        }
    }
    if let Some(f) = first {
        chunks.push(make_chunk(doc, f, doc.sentences.len() - 1));
    }
    chunks
}

/// Percentile of sorted values with linear interpolation between order
/// statistics.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    assert!((0.0..=100.0).contains(&p));
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = rank - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Embed each sentence, compute adjacent cosine distances, and split where
/// the distance strictly exceeds the given percentile of all distances.
pub fn semantic_chunk(
    doc: &Document,
    embedder: &dyn TextEmbedder,
    breakpoint_percentile: f64,
) -> Result<Vec<Chunk>, EmbedderError> {
    let n = doc.sentences.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n == 1 {
        return Ok(vec![make_chunk(doc, 0, 0)]);
    }
    let texts: Vec<&str> = doc.sentences.iter().map(|s| s.text.as_str()).collect();
    let embeddings = embedder.embed_batch(&texts)?;
    let distances: Vec<f64> = embeddings
        .windows(2)
        .map(|w| 1.0 - w[0].cosine(&w[1]) as f64)
        .collect();
    let threshold = percentile(&distances, breakpoint_percentile);
    let mut chunks = Vec::new();
    let mut first = 0usize;
    for (i, &d) in distances.iter().enumerate() {
        if d > threshold {
            chunks.push(make_chunk(doc, first, i));
            first = i + 1;
        }
    }
    chunks.push(make_chunk(doc, first, n - 1));
    Ok(chunks)
}

/// Partition check used by tests and the fuzz harness: every sentence in
/// exactly one chunk, order preserved, no gaps.
pub fn is_partition(doc: &Document, chunks: &[Chunk]) -> bool {
    let mut next = 0usize;
    for c in chunks {
        if c.first != next || c.last < c.first {
            return false;
        }
        next = c.last + 1;
    }
    next == doc.sentences.len()
}
