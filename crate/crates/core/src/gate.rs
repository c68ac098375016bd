//! Threshold-gated retrieval over the local knowledge base and the web.
//!
//! A question is first answered from the local index. Only when the best
//! local similarity does not exceed the threshold `c` is the web consulted;
//! web paragraphs that clear `c` pull their whole parent document into the
//! index so the next identical question stays local.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    chunk_document, normalize_text, Chunk, CorpusError, Document, Origin, DEFAULT_CHUNK_LIMIT,
};
use crate::encoder::{Embedding, EncoderPair};
use crate::index::{compare_hits, IndexError, IndexedChunk, SimilarityMetric, VectorIndex};
use crate::prompting::rank;
use crate::websearch::{source_label, SearchClient, SearchResult, WebError};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_WEB_DOC_COUNT: usize = 5;
pub const DEFAULT_QUANTILE: f64 = 0.01;
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GateError {
    #[error("invalid gate config: {0}")]
    InvalidConfig(String),
    #[error("at least one of use_kb and use_web must be enabled")]
    NoSources,
    #[error("embedding dimension mismatch: {0}")]
    EmbeddingDimensionMismatch(IndexError),
    #[error(transparent)]
    Index(IndexError),
    #[error("document {0} is already in the knowledge base")]
    DuplicateDocument(String),
    #[error("document body contains no tokens")]
    EmptyDocument,
    #[error(transparent)]
    Corpus(CorpusError),
    #[error(transparent)]
    Web(#[from] WebError),
    #[error("holdout set is empty")]
    EmptyHoldout,
    #[error("quantile must lie strictly between 0 and 1")]
    InvalidQuantile,
}

impl From<IndexError> for GateError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::DimensionMismatch { .. } => GateError::EmbeddingDimensionMismatch(e),
            other => GateError::Index(other),
        }
    }
}

impl From<CorpusError> for GateError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::EmptyDocument => GateError::EmptyDocument,
            other => GateError::Corpus(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub k: usize,
    /// Similarity threshold `c`; must lie in (0, 1) under cosine.
    pub threshold: f64,
    pub metric: SimilarityMetric,
    pub use_kb: bool,
    pub use_web: bool,
    pub web_doc_count: usize,
    pub auto_update: bool,
    pub chunk_limit: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            threshold: 0.5,
            metric: SimilarityMetric::Cosine,
            use_kb: true,
            use_web: true,
            web_doc_count: DEFAULT_WEB_DOC_COUNT,
            auto_update: true,
            chunk_limit: DEFAULT_CHUNK_LIMIT,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), GateError> {
        if self.k == 0 {
            return Err(GateError::InvalidConfig("k must be at least 1".into()));
        }
        if self.web_doc_count == 0 {
            return Err(GateError::InvalidConfig(
                "web_doc_count must be at least 1".into(),
            ));
        }
        if self.chunk_limit == 0 {
            return Err(GateError::InvalidConfig(
                "chunk_limit must be at least 1".into(),
            ));
        }
        let c = self.threshold;
        let ok = match self.metric {
            SimilarityMetric::Cosine => c > 0.0 && c < 1.0,
            _ => c.is_finite(),
        };
        if !ok {
            return Err(GateError::InvalidConfig(format!(
                "threshold {c} out of range for {} similarity",
                self.metric
            )));
        }
        if !self.use_kb && !self.use_web {
            return Err(GateError::NoSources);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedParagraph {
    pub chunk: Chunk,
    pub score: f64,
    pub provenance: Origin,
    /// Publisher for local documents, host name for web documents.
    pub source: String,
    pub source_url: Option<String>,
    pub published_at: DateTime<Utc>,
}

impl RetrievedParagraph {
    pub fn chunk_id(&self) -> String {
        self.chunk.id()
    }

    fn from_indexed(entry: &IndexedChunk, score: f64) -> Self {
        let source_url = (entry.origin == Origin::Web).then(|| entry.source.clone());
        let source = match entry.origin {
            Origin::Web => source_label(&entry.source),
            Origin::Local => entry.source.clone(),
        };
        Self {
            published_at: entry.chunk.published_at,
            chunk: entry.chunk.clone(),
            score,
            provenance: Origin::Local,
            source,
            source_url,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    /// Best local similarity; absent when the knowledge base was not consulted
    /// or is empty.
    pub local_max_score: Option<f64>,
    pub web_search_performed: bool,
    pub web_calls: usize,
    /// Set when the web search failed and only local results were returned.
    pub web_degraded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub web_error: Option<String>,
    pub kb_documents_added: usize,
    pub result_count: usize,
    pub timings: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaveOutcome {
    pub id: String,
    pub chunk_count: usize,
    pub already_present: bool,
}

/// Document id for a web page: `web-` + FNV-1a-64 of the url in hex.
pub fn web_document_id(url: &str) -> String {
    format!("web-{:016x}", crate::corpus::fnv1a64(url.as_bytes()))
}

/// Chunks and key-embeds a document.
pub fn embed_document(
    encoder: &EncoderPair,
    doc: &Document,
    chunk_limit: usize,
) -> Result<Vec<(IndexedChunk, Embedding)>, GateError> {
    let chunks = chunk_document(doc, chunk_limit)?;
    Ok(chunks
        .into_par_iter()
        .map(|chunk| {
            let emb = encoder.embed_key_text(&chunk.text);
            (
                IndexedChunk {
                    chunk,
                    source: doc.source.clone(),
                    origin: doc.origin,
                },
                emb,
            )
        })
        .collect())
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}

struct WebDocument {
    doc: Document,
    chunks: Vec<(IndexedChunk, Embedding)>,
    scores: Vec<f64>,
}

/// Retrieval orchestrator bound to one encoder, knowledge base and web client.
pub struct Gate<'a> {
    encoder: &'a EncoderPair,
    kb: &'a RwLock<VectorIndex>,
    client: &'a dyn SearchClient,
    clock: fn() -> DateTime<Utc>,
    as_of: Option<DateTime<Utc>>,
}

impl<'a> Gate<'a> {
    pub fn new(
        encoder: &'a EncoderPair,
        kb: &'a RwLock<VectorIndex>,
        client: &'a dyn SearchClient,
    ) -> Self {
        Self {
            encoder,
            kb,
            client,
            clock: Utc::now,
            as_of: None,
        }
    }

    /// Overrides the clock used to date fetched pages that carry no date.
    pub fn with_clock(mut self, clock: fn() -> DateTime<Utc>) -> Self {
        self.clock = clock;
        self
    }

    /// Dates undated search results at `t` instead of the clock, which keeps
    /// answers for a fixed question date reproducible.
    pub fn with_as_of(mut self, t: DateTime<Utc>) -> Self {
        self.as_of = Some(t);
        self
    }

    fn now(&self) -> DateTime<Utc> {
        self.as_of.unwrap_or_else(self.clock)
    }

    pub fn retrieve(
        &self,
        question: &str,
        cfg: &GateConfig,
    ) -> Result<(Vec<RetrievedParagraph>, GateTrace), GateError> {
        cfg.validate()?;
        let mut trace = GateTrace::default();
        let query = self.encoder.embed_query_text(question);

        let mut local = Vec::new();
        if cfg.use_kb {
            let start = Instant::now();
            let kb = self.kb.read();
            for hit in kb.search(&query, cfg.k, cfg.metric)? {
                let entry = kb.get(&hit.chunk_id).expect("hit refers to a stored chunk");
                local.push(RetrievedParagraph::from_indexed(entry, hit.score));
            }
            drop(kb);
            trace.local_max_score = local.first().map(|p| p.score);
            trace
                .timings
                .insert("local_search".into(), elapsed_ms(start));
        }

        let local_suffices = trace
            .local_max_score
            .is_some_and(|best| best > cfg.threshold);
        if local_suffices || !cfg.use_web {
            trace.result_count = local.len();
            return Ok((local, trace));
        }

        trace.web_search_performed = true;
        trace.web_calls = 1;
        let start = Instant::now();
        let results = match self.client.search(question, cfg.web_doc_count) {
            Ok(r) => r,
            Err(e) => {
                trace.web_degraded = true;
                trace.web_error = Some(e.to_string());
                trace.timings.insert("web_search".into(), elapsed_ms(start));
                trace.result_count = local.len();
                return Ok((local, trace));
            }
        };
        trace.timings.insert("web_search".into(), elapsed_ms(start));

        let start = Instant::now();
        let web_docs = self.fetch_and_score(&results, &query, cfg)?;
        trace
            .timings
            .insert("web_fetch_embed".into(), elapsed_ms(start));

        let mut web: Vec<RetrievedParagraph> = web_docs
            .iter()
            .flat_map(|wd| {
                wd.chunks
                    .iter()
                    .zip(&wd.scores)
                    .map(|((entry, _), &score)| RetrievedParagraph {
                        chunk: entry.chunk.clone(),
                        score,
                        provenance: Origin::Web,
                        source: source_label(&wd.doc.source),
                        source_url: Some(wd.doc.source.clone()),
                        published_at: entry.chunk.published_at,
                    })
            })
            .collect();
        web.sort_by(|a, b| compare_hits(a.score, &a.chunk_id(), b.score, &b.chunk_id()));
        web.truncate(cfg.k);

        let mut merged = rank(local.into_iter().chain(web).collect());
        let mut seen = HashSet::new();
        merged.retain(|p| seen.insert(normalize_text(&p.chunk.text)));

        if cfg.auto_update {
            let start = Instant::now();
            let mut kb = self.kb.write();
            for wd in &web_docs {
                let qualifies = wd.scores.iter().any(|&s| s > cfg.threshold);
                if qualifies && !kb.contains_document(&wd.doc.id) {
                    kb.add_chunks(wd.chunks.clone())?;
                    trace.kb_documents_added += 1;
                }
            }
            trace.timings.insert("kb_update".into(), elapsed_ms(start));
        }

        trace.result_count = merged.len();
        Ok((merged, trace))
    }

    /// Fetches every result concurrently, falling back to the snippet when a
    /// fetch fails, then chunks, embeds and scores. Output follows search rank.
    fn fetch_and_score(
        &self,
        results: &[SearchResult],
        query: &Embedding,
        cfg: &GateConfig,
    ) -> Result<Vec<WebDocument>, GateError> {
        let now = self.now();
        let pages: Vec<Option<Document>> = std::thread::scope(|s| {
            let handles: Vec<_> = results
                .iter()
                .map(|r| {
                    s.spawn(move || {
                        let (text, date) = match self.client.fetch(&r.url) {
                            Ok(page) => (page.text, page.published_at),
                            Err(_) => (r.snippet.clone(), None),
                        };
                        if text.trim().is_empty() {
                            return None;
                        }
                        Some(Document {
                            id: web_document_id(&r.url),
                            published_at: date.or(r.published_at).unwrap_or(now),
                            title: r.title.clone(),
                            summary: text,
                            topics: Vec::new(),
                            source: r.url.clone(),
                            origin: Origin::Web,
                        })
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fetch worker panicked"))
                .collect()
        });

        let mut out = Vec::new();
        let mut seen_ids = HashSet::new();
        for doc in pages.into_iter().flatten() {
            if !seen_ids.insert(doc.id.clone()) {
                continue;
            }
            let chunks = match embed_document(self.encoder, &doc, cfg.chunk_limit) {
                Ok(c) => c,
                Err(GateError::EmptyDocument) => continue,
                Err(e) => return Err(e),
            };
            let mut scores = Vec::with_capacity(chunks.len());
            for (_, emb) in &chunks {
                if emb.dim() != query.dim() {
                    return Err(IndexError::DimensionMismatch {
                        expected: query.dim(),
                        actual: emb.dim(),
                    }
                    .into());
                }
                scores.push(cfg.metric.score(query.as_slice(), emb.as_slice()));
            }
            out.push(WebDocument {
                doc,
                chunks,
                scores,
            });
        }
        Ok(out)
    }

    /// Fetches a page and stores the whole document. Idempotent per url.
    pub fn save_web_document(
        &self,
        url: &str,
        chunk_limit: usize,
    ) -> Result<SaveOutcome, GateError> {
        let id = web_document_id(url);
        if self.kb.read().contains_document(&id) {
            return Ok(SaveOutcome {
                id,
                chunk_count: 0,
                already_present: true,
            });
        }
        let page = self.client.fetch(url)?;
        let doc = Document {
            id: id.clone(),
            published_at: page.published_at.unwrap_or_else(self.clock),
            title: source_label(url),
            summary: page.text,
            topics: Vec::new(),
            source: url.to_string(),
            origin: Origin::Web,
        };
        let batch = embed_document(self.encoder, &doc, chunk_limit)?;
        let mut kb = self.kb.write();
        if kb.contains_document(&id) {
            return Ok(SaveOutcome {
                id,
                chunk_count: 0,
                already_present: true,
            });
        }
        let chunk_count = kb.add_chunks(batch)?;
        Ok(SaveOutcome {
            id,
            chunk_count,
            already_present: false,
        })
    }
}

/// Chunks, embeds and stores one document atomically.
pub fn ingest_document(
    encoder: &EncoderPair,
    kb: &RwLock<VectorIndex>,
    doc: &Document,
    chunk_limit: usize,
) -> Result<usize, GateError> {
    if doc.summary.trim().is_empty() {
        return Err(GateError::EmptyDocument);
    }
    if kb.read().contains_document(&doc.id) {
        return Err(GateError::DuplicateDocument(doc.id.clone()));
    }
    let batch = embed_document(encoder, doc, chunk_limit)?;
    let mut kb = kb.write();
    if kb.contains_document(&doc.id) {
        return Err(GateError::DuplicateDocument(doc.id.clone()));
    }
    Ok(kb.add_chunks(batch)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutPair {
    pub query_text: String,
    pub positive_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[min, max]`; the maximum lands in the last bin.
    pub fn equal_width(values: &[f64], bins: usize) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0; bins];
        if values.is_empty() || bins == 0 {
            return Self {
                min: 0.0,
                max: 0.0,
                counts,
            };
        }
        let width = (max - min) / bins as f64;
        for &v in values {
            let bin = if width > 0.0 {
                (((v - min) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[bin] += 1;
        }
        Self { min, max, counts }
    }
}

/// Calibration report written next to the chosen threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub n: usize,
    pub quantile: f64,
    pub metric: SimilarityMetric,
    pub threshold: f64,
    pub histogram: Histogram,
}

/// Nearest-rank quantile of ascending-sorted values: element `ceil(p*n) - 1`.
///
/// `p*n` within 1e-9 of an integer is treated as that integer, so e.g.
/// `0.07 * 100` selects index 6 rather than 7.
pub fn nearest_rank(sorted: &[f64], quantile: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = quantile * sorted.len() as f64;
    let rank = if (pos - pos.round()).abs() < 1e-9 {
        pos.round()
    } else {
        pos.ceil()
    };
    let idx = (rank as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Picks the threshold as the nearest-rank quantile of holdout similarities.
/// Under cosine the value is clamped into the open interval (0, 1).
pub fn calibrate_threshold(
    encoder: &EncoderPair,
    holdout: &[HoldoutPair],
    metric: SimilarityMetric,
    quantile: f64,
) -> Result<Calibration, GateError> {
    if holdout.is_empty() {
        return Err(GateError::EmptyHoldout);
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(GateError::InvalidQuantile);
    }
    let mut sims: Vec<f64> = holdout
        .par_iter()
        .map(|pair| {
            let q = encoder.embed_query_text(&pair.query_text);
            let e = encoder.embed_key_text(&pair.positive_text);
            metric.score(q.as_slice(), e.as_slice())
        })
        .collect();
    sims.sort_by(f64::total_cmp);
    let mut threshold = nearest_rank(&sims, quantile);
    if metric == SimilarityMetric::Cosine {
        threshold = threshold.clamp(1e-9, 1.0 - 1e-9);
    }
    Ok(Calibration {
        n: sims.len(),
        quantile,
        metric,
        threshold,
        histogram: Histogram::equal_width(&sims, HISTOGRAM_BINS),
    })
}

pub fn read_holdout<R: std::io::BufRead>(reader: R) -> Result<Vec<HoldoutPair>, CorpusError> {
    crate::corpus::read_lines(reader, |line| {
        serde_json::from_str::<HoldoutPair>(line).map_err(|e| e.to_string())
    })
}
