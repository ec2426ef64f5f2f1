//! In-memory chunk index with exact brute-force cosine top-k and span-aware
//! context assembly.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sentencizer::Document;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding is not unit-norm (|v| = {0})")]
    NotUnitNorm(f32),
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be >= 1")]
    ZeroK,
    #[error("index i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("index parse error at line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
}

/// One indexed chunk: embedding plus provenance. Serialized one-per-line in
/// the index JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub doc_id: String,
    /// Sentence index set (strictly increasing).
    pub indices: Vec<usize>,
    /// Granularity (cardinality of the index set).
    pub g: usize,
    /// Smallest sentence index.
    pub s: usize,
    pub embedding: Vec<f32>,
    #[serde(default)]
    pub ordinal: u64,
}

impl ChunkRecord {
    pub fn new(doc_id: impl Into<String>, indices: Vec<usize>, embedding: Vec<f32>) -> Self {
        let g = indices.len();
        let s = indices.first().copied().unwrap_or(0);
        ChunkRecord {
            doc_id: doc_id.into(),
            indices,
            g,
            s,
            embedding,
            ordinal: 0,
        }
    }

    fn norm(&self) -> f32 {
        self.embedding.iter().map(|v| v * v).sum::<f32>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalHit {
    pub record: ChunkRecord,
    pub score: f32,
    pub rank: usize,
}

#[derive(Debug, Default, Clone)]
pub struct ChunkIndex {
    records: Vec<ChunkRecord>,
    by_key: HashMap<(String, Vec<usize>), usize>,
    next_ordinal: u64,
}

impl ChunkIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ChunkRecord] {
        &self.records
    }

    /// Append records; a record with the same (doc_id, index set) as an
    /// existing one replaces it (newest wins). Returns the net number of new
    /// entries.
    pub fn add_chunks(&mut self, records: Vec<ChunkRecord>) -> Result<usize, RetrievalError> {
        let mut added = 0usize;
        for mut rec in records {
            let norm = rec.norm();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(RetrievalError::NotUnitNorm(norm));
            }
            rec.ordinal = self.next_ordinal;
            self.next_ordinal += 1;
            let key = (rec.doc_id.clone(), rec.indices.clone());
            match self.by_key.get(&key) {
                Some(&pos) => self.records[pos] = rec,
                None => {
                    self.by_key.insert(key, self.records.len());
                    self.records.push(rec);
                    added += 1;
                }
            }
        }
        Ok(added)
    }

    /// Exact top-k by cosine score. Ties break toward smaller granularity,
    /// then smaller start, then smaller insertion ordinal.
    pub fn query_top_k(&self, query: &[f32], k: usize) -> Result<Vec<RetrievalHit>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if self.records.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let mut scored: Vec<(f32, &ChunkRecord)> = self
            .records
            .iter()
            .map(|r| {
                let score: f32 = r.embedding.iter().zip(query).map(|(a, b)| a * b).sum();
                (score, r)
            })
            .collect();
        scored.sort_by(|(sa, ra), (sb, rb)| {
            sb.partial_cmp(sa)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ra.g.cmp(&rb.g))
                .then(ra.s.cmp(&rb.s))
                .then(ra.ordinal.cmp(&rb.ordinal))
        });
        Ok(scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(rank, (score, record))| RetrievalHit {
                record: record.clone(),
                score,
                rank,
            })
            .collect())
    }

    pub fn save_jsonl<W: Write>(&self, mut out: W) -> Result<(), RetrievalError> {
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec).map_err(|e| RetrievalError::Parse {
                line: 0,
                source: e,
            })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load_jsonl<R: BufRead>(reader: R) -> Result<Self, RetrievalError> {
        let mut index = ChunkIndex::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ChunkRecord =
                serde_json::from_str(&line).map_err(|e| RetrievalError::Parse {
                    line: lineno + 1,
                    source: e,
                })?;
            index.add_chunks(vec![rec])?;
        }
        Ok(index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextBlock {
    pub doc_id: String,
    pub sentence_indices: Vec<usize>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssembledContext {
    pub blocks: Vec<ContextBlock>,
    pub token_total: usize,
    /// Set when a hit was cut off by the budget.
    pub truncated: bool,
}

/// Walk hits in rank order accumulating the union of (doc, sentence) pairs,
/// stopping before the first hit whose unseen sentences would blow the
/// token budget. Sentences are emitted per document in document order,
/// never duplicated.
pub fn assemble_context(
    hits: &[RetrievalHit],
    docs: &HashMap<String, Document>,
    token_budget: usize,
) -> AssembledContext {
    assert!(token_budget >= 1, "token budget must be >= 1");
    let mut seen: HashSet<(String, usize)> = HashSet::new();
    let mut doc_order: Vec<String> = Vec::new();
    let mut total = 0usize;
    let mut truncated = false;
    for hit in hits {
        let Some(doc) = docs.get(&hit.record.doc_id) else {
            continue;
        };
        let unseen: Vec<usize> = hit
            .record
            .indices
            .iter()
            .copied()
            .filter(|&i| i < doc.sentences.len())
            .filter(|&i| !seen.contains(&(hit.record.doc_id.clone(), i)))
            .collect();
        let cost: usize = unseen.iter().map(|&i| doc.sentences[i].token_count).sum();
        if total + cost > token_budget {
            truncated = true;
            break;
        }
        if !doc_order.contains(&hit.record.doc_id) {
            doc_order.push(hit.record.doc_id.clone());
        }
        for i in unseen {
            seen.insert((hit.record.doc_id.clone(), i));
        }
        total += cost;
    }
    let blocks = doc_order
        .into_iter()
        .map(|doc_id| {
            let doc = &docs[&doc_id];
            let mut indices: Vec<usize> = (0..doc.sentences.len())
                .filter(|&i| seen.contains(&(doc_id.clone(), i)))
                .collect();
            indices.sort_unstable();
            let text = indices
                .iter()
                .map(|&i| doc.sentences[i].text.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            ContextBlock {
                doc_id,
                sentence_indices: indices,
                text,
            }
        })
        .collect();
    AssembledContext {
        blocks,
        token_total: total,
        truncated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedders::toy_embed;

    fn unit(values: Vec<f32>) -> Vec<f32> {
        let n = values.iter().map(|v| v * v).sum::<f32>().sqrt();
        values.into_iter().map(|v| v / n).collect()
    }

    #[test]
    fn add_and_count() {
        let mut index = ChunkIndex::new();
        let recs = vec![
            ChunkRecord::new("d", vec![0, 1], unit(vec![1.0, 0.0])),
            ChunkRecord::new("d", vec![2, 3], unit(vec![0.0, 1.0])),
            ChunkRecord::new("d", vec![4], unit(vec![1.0, 1.0])),
        ];
        assert_eq!(index.add_chunks(recs).unwrap(), 3);
    }

    #[test]
    fn duplicate_replaced_newest_wins() {
        let mut index = ChunkIndex::new();
        index
            .add_chunks(vec![ChunkRecord::new("d", vec![0, 1], unit(vec![1.0, 0.0]))])
            .unwrap();
        let added = index
            .add_chunks(vec![ChunkRecord::new("d", vec![0, 1], unit(vec![0.0, 1.0]))])
            .unwrap();
        assert_eq!(added, 0);
        assert_eq!(index.len(), 1);
        assert_eq!(index.records()[0].embedding, unit(vec![0.0, 1.0]));
    }

    #[test]
    fn non_unit_rejected() {
        let mut index = ChunkIndex::new();
        let rec = ChunkRecord::new("d", vec![0], vec![0.5, 0.0]);
        assert!(matches!(
            index.add_chunks(vec![rec]),
            Err(RetrievalError::NotUnitNorm(_))
        ));
    }

    #[test]
    fn top_k_basics() {
        let mut index = ChunkIndex::new();
        index
            .add_chunks(vec![
                ChunkRecord::new("d", vec![0], vec![1.0, 0.0]),
                ChunkRecord::new("d", vec![1], vec![0.0, 1.0]),
            ])
            .unwrap();
        let hits = index.query_top_k(&[1.0, 0.0], 1).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].record.indices, vec![0]);
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        // k larger than index size clamps.
        assert_eq!(index.query_top_k(&[1.0, 0.0], 10).unwrap().len(), 2);
    }

    #[test]
    fn tie_breaks_prefer_finer_granularity() {
        let mut index = ChunkIndex::new();
        let e = unit(vec![1.0, 1.0]);
        index
            .add_chunks(vec![
                ChunkRecord::new("d", vec![0, 1, 2, 3], e.clone()),
                ChunkRecord::new("d", vec![4, 5], e.clone()),
            ])
            .unwrap();
        let hits = index.query_top_k(&e, 2).unwrap();
        assert_eq!(hits[0].record.g, 2);
        assert_eq!(hits[1].record.g, 4);
    }

    #[test]
    fn empty_index_errors() {
        let index = ChunkIndex::new();
        assert!(matches!(
            index.query_top_k(&[1.0, 0.0], 1),
            Err(RetrievalError::EmptyIndex)
        ));
    }

    #[test]
    fn matches_full_sort_oracle_on_random_instances() {
        for trial in 0..100u64 {
            let d = 8;
            let mut index = ChunkIndex::new();
            let n = 20 + (trial as usize % 10);
            let recs: Vec<ChunkRecord> = (0..n)
                .map(|i| {
                    ChunkRecord::new(
                        "d",
                        vec![i],
                        toy_embed(&format!("r{trial}-{i}"), d, 0).values,
                    )
                })
                .collect();
            index.add_chunks(recs.clone()).unwrap();
            let q = toy_embed(&format!("q{trial}"), d, 1).values;
            let k = 5;
            let hits = index.query_top_k(&q, k).unwrap();

            // Independent oracle: score everything, full stable sort.
            let mut oracle: Vec<(f32, usize)> = recs
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    (
                        r.embedding.iter().zip(&q).map(|(a, b)| a * b).sum::<f32>(),
                        i,
                    )
                })
                .collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for (hit, (score, idx)) in hits.iter().zip(oracle.iter().take(k)) {
                assert_eq!(hit.score, *score);
                assert_eq!(hit.record.indices, vec![*idx]);
            }
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let mut index = ChunkIndex::new();
        index
            .add_chunks(vec![
                ChunkRecord::new("a", vec![0, 1], unit(vec![1.0, 2.0])),
                ChunkRecord::new("b", vec![3], unit(vec![0.5, -0.5])),
            ])
            .unwrap();
        let mut buf = Vec::new();
        index.save_jsonl(&mut buf).unwrap();
        let loaded = ChunkIndex::load_jsonl(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(loaded.records().len(), 2);
        assert_eq!(loaded.records()[0].doc_id, "a");
        assert_eq!(loaded.records()[0].embedding, index.records()[0].embedding);
    }

    fn doc_with_token_sentences(id: &str, n: usize) -> Document {
        // Each sentence has 3 tokens ("Sentence number five." -> 4 with
        // period; keep it simple: "word word." = 3 tokens).
        let text: String = (0..n).map(|i| format!("word word{i}. ")).collect();
        Document::new(id, text.trim_end())
    }

    fn hit(doc: &str, indices: Vec<usize>, rank: usize) -> RetrievalHit {
        RetrievalHit {
            record: ChunkRecord::new(doc, indices, vec![1.0, 0.0]),
            score: 1.0,
            rank,
        }
    }

    #[test]
    fn assemble_single_hit_in_order() {
        let doc = doc_with_token_sentences("d", 5);
        let docs = HashMap::from([("d".to_string(), doc.clone())]);
        let ctx = assemble_context(&[hit("d", vec![2, 3], 0)], &docs, 100);
        assert_eq!(ctx.blocks.len(), 1);
        assert_eq!(ctx.blocks[0].sentence_indices, vec![2, 3]);
        assert!(!ctx.truncated);
        let expect = format!("{} {}", doc.sentences[2].text, doc.sentences[3].text);
        assert_eq!(ctx.blocks[0].text, expect);
    }

    #[test]
    fn assemble_overlap_union_no_duplicates() {
        let doc = doc_with_token_sentences("d", 5);
        let docs = HashMap::from([("d".to_string(), doc)]);
        let hits = [hit("d", vec![0, 1], 0), hit("d", vec![1, 2], 1)];
        let ctx = assemble_context(&hits, &docs, 100);
        assert_eq!(ctx.blocks[0].sentence_indices, vec![0, 1, 2]);
    }

    #[test]
    fn assemble_degenerate_budget() {
        let doc = doc_with_token_sentences("d", 3);
        let docs = HashMap::from([("d".to_string(), doc)]);
        let ctx = assemble_context(&[hit("d", vec![0, 1], 0)], &docs, 1);
        assert!(ctx.blocks.is_empty());
        assert!(ctx.truncated);
        assert_eq!(ctx.token_total, 0);
    }

    #[test]
    fn assemble_budget_never_exceeded() {
        let doc = doc_with_token_sentences("d", 10);
        let docs = HashMap::from([("d".to_string(), doc)]);
        for budget in 1..40 {
            let hits = [
                hit("d", vec![0, 1], 0),
                hit("d", vec![2, 3, 4], 1),
                hit("d", vec![5], 2),
            ];
            let ctx = assemble_context(&hits, &docs, budget);
            assert!(ctx.token_total <= budget);
        }
    }
}
