//! Retrieval evaluation: AP@K, recall@K and the encoder x metric benchmark.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{chunk_document, CorpusError, Document};
use crate::encoder::EncoderPair;
use crate::index::{IndexError, IndexedChunk, SimilarityMetric, VectorIndex};

pub const DEFAULT_EVAL_K: usize = 5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("relevant set is empty")]
    EmptyRelevantSet,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("judged chunk {chunk_id} for query {query_id} is not in the corpus")]
    MissingChunk { query_id: String, chunk_id: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// `(1 / min(|relevant|, k)) * sum of precision@i over relevant hits i <= k`.
pub fn average_precision_at_k<T: Eq + Hash>(
    ranked: &[T],
    relevant: &HashSet<T>,
    k: usize,
) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if relevant.is_empty() {
        return Err(EvalError::EmptyRelevantSet);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len().min(k) as f64)
}

pub fn recall_at_k<T: Eq + Hash>(
    ranked: &[T],
    relevant: &HashSet<T>,
    k: usize,
) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if relevant.is_empty() {
        return Err(EvalError::EmptyRelevantSet);
    }
    let found = ranked.iter().take(k).collect::<HashSet<_>>();
    let covered = found
        .iter()
        .filter(|item| relevant.contains(**item))
        .count();
    Ok(covered as f64 / relevant.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub query_id: String,
    pub query_text: String,
    pub relevant_chunk_ids: Vec<String>,
}

pub fn read_judgments<R: std::io::BufRead>(reader: R) -> Result<Vec<Judgment>, CorpusError> {
    crate::corpus::read_lines(reader, |line| {
        let j: Judgment = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if j.relevant_chunk_ids.is_empty() {
            return Err(format!("query {} has no relevant chunks", j.query_id));
        }
        Ok(j)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEval {
    pub query_id: String,
    pub average_precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub encoder_label: String,
    pub metric_label: String,
    pub k: usize,
    pub map_at_k: f64,
    pub mar_at_k: f64,
    pub per_query: Vec<QueryEval>,
}

/// A labelled encoder taking part in a benchmark.
pub struct BenchmarkEncoder<'a> {
    pub label: String,
    pub encoder: &'a EncoderPair,
}

/// Builds one index per encoder and scores every (encoder, metric) cell.
/// Reports come out in encoder order, then metric order.
pub fn run_benchmark(
    corpus: &[Document],
    judgments: &[Judgment],
    encoders: &[BenchmarkEncoder<'_>],
    metrics: &[SimilarityMetric],
    k: usize,
    chunk_limit: usize,
) -> Result<Vec<EvalReport>, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    let mut chunks = Vec::new();
    for doc in corpus {
        for chunk in chunk_document(doc, chunk_limit)? {
            chunks.push(IndexedChunk {
                chunk,
                source: doc.source.clone(),
                origin: doc.origin,
            });
        }
    }
    let known: HashSet<String> = chunks.iter().map(|c| c.chunk.id()).collect();
    for j in judgments {
        if j.relevant_chunk_ids.is_empty() {
            return Err(EvalError::EmptyRelevantSet);
        }
        if let Some(missing) = j.relevant_chunk_ids.iter().find(|id| !known.contains(*id)) {
            return Err(EvalError::MissingChunk {
                query_id: j.query_id.clone(),
                chunk_id: missing.clone(),
            });
        }
    }
    let mut judgments: Vec<&Judgment> = judgments.iter().collect();
    judgments.sort_by(|a, b| a.query_id.cmp(&b.query_id));

    let mut reports = Vec::with_capacity(encoders.len() * metrics.len());
    for enc in encoders {
        let mut index = VectorIndex::new(enc.encoder.dim());
        let batch = chunks
            .par_iter()
            .map(|c| (c.clone(), enc.encoder.embed_key_text(&c.chunk.text)))
            .collect();
        index.add_chunks(batch)?;
        let queries: Vec<_> = judgments
            .par_iter()
            .map(|j| enc.encoder.embed_query_text(&j.query_text))
            .collect();

        for &metric in metrics {
            let per_query = judgments
                .par_iter()
                .zip(&queries)
                .map(|(j, q)| {
                    let ranked: Vec<String> = index
                        .search(q, k, metric)?
                        .into_iter()
                        .map(|h| h.chunk_id)
                        .collect();
                    let relevant: HashSet<String> = j.relevant_chunk_ids.iter().cloned().collect();
                    Ok(QueryEval {
                        query_id: j.query_id.clone(),
                        average_precision: average_precision_at_k(&ranked, &relevant, k)?,
                        recall: recall_at_k(&ranked, &relevant, k)?,
                    })
                })
                .collect::<Result<Vec<_>, EvalError>>()?;
            let n = per_query.len().max(1) as f64;
            reports.push(EvalReport {
                encoder_label: enc.label.clone(),
                metric_label: metric.as_str().to_string(),
                k,
                map_at_k: per_query.iter().map(|q| q.average_precision).sum::<f64>() / n,
                mar_at_k: per_query.iter().map(|q| q.recall).sum::<f64>() / n,
                per_query,
            });
        }
    }
    Ok(reports)
}

/// Aligned plain-text table of MAP/MAR per cell.
pub fn render_table(reports: &[EvalReport]) -> String {
    let enc_w = reports
        .iter()
        .map(|r| r.encoder_label.len())
        .max()
        .unwrap_or(0)
        .max("encoder".len());
    let met_w = reports
        .iter()
        .map(|r| r.metric_label.len())
        .max()
        .unwrap_or(0)
        .max("metric".len());
    let mut out = String::new();
    let k = reports.first().map_or(DEFAULT_EVAL_K, |r| r.k);
    let map_h = format!("MAP@{k}");
    let mar_h = format!("MAR@{k}");
    let _ = writeln!(
        out,
        "{:<enc_w$}  {:<met_w$}  {:>8}  {:>8}",
        "encoder", "metric", map_h, mar_h
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<enc_w$}  {:<met_w$}  {:>8.4}  {:>8.4}",
            r.encoder_label, r.metric_label, r.map_at_k, r.mar_at_k
        );
    }
    out
}

/// MAP per (encoder, metric) cell, for quick lookups in tests and tooling.
pub fn map_by_cell(reports: &[EvalReport]) -> BTreeMap<(String, String), f64> {
    reports
        .iter()
        .map(|r| {
            (
                (r.encoder_label.clone(), r.metric_label.clone()),
                r.map_at_k,
            )
        })
        .collect()
}
