//! Flat vector index with exact, metric-parametrized top-K search.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::DateTime;
use serde::{Deserialize, Serialize};

use crate::corpus::{Chunk, Origin};
use crate::encoder::{dot, Embedding};

const SNAPSHOT_MAGIC: &[u8; 8] = b"FRAGIDX\0";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("duplicate chunk id {0}")]
    DuplicateChunkId(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("bad snapshot: {0}")]
    BadSnapshot(String),
}

/// Similarity used for ranking. Higher is always better; euclidean distance
/// is negated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMetric {
    #[default]
    Cosine,
    Dot,
    Euclidean,
}

impl SimilarityMetric {
    pub const ALL: [SimilarityMetric; 3] = [Self::Cosine, Self::Dot, Self::Euclidean];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cosine => "cosine",
            Self::Dot => "dot",
            Self::Euclidean => "euclidean",
        }
    }

    pub fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Self::Cosine => cosine_with_norms(dot(a, b), norm(a), norm(b)),
            Self::Dot => dot(a, b),
            Self::Euclidean => -squared_distance(a, b).sqrt(),
        }
    }
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimilarityMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" => Ok(Self::Cosine),
            "dot" => Ok(Self::Dot),
            "euclidean" => Ok(Self::Euclidean),
            other => Err(format!("unknown metric {other:?} (cosine, dot, euclidean)")),
        }
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cosine_with_norms(dot: f64, na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(SimilarityMetric::Cosine.score(&a.0, &b.0))
}

/// Result ordering: score descending, then chunk id ascending.
pub fn compare_hits(score_a: f64, id_a: &str, score_b: f64, id_b: &str) -> Ordering {
    // `+ 0.0` folds -0.0 into 0.0 so signed zeros tie
    (score_b + 0.0)
        .total_cmp(&(score_a + 0.0))
        .then_with(|| id_a.cmp(id_b))
}

/// A stored paragraph with the provenance needed for citations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedChunk {
    pub chunk: Chunk,
    pub source: String,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub chunk_id: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    entries: Vec<IndexedChunk>,
    /// Row-major `len x dim`.
    vectors: Vec<f64>,
    norms: Vec<f64>,
    positions: HashMap<String, usize>,
    doc_ids: HashSet<String>,
    generation: u64,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            entries: Vec::new(),
            vectors: Vec::new(),
            norms: Vec::new(),
            positions: HashMap::new(),
            doc_ids: HashSet::new(),
            generation: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Number of distinct documents with at least one stored chunk.
    pub fn document_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn contains_document(&self, doc_id: &str) -> bool {
        self.doc_ids.contains(doc_id)
    }

    pub fn contains_chunk(&self, chunk_id: &str) -> bool {
        self.positions.contains_key(chunk_id)
    }

    pub fn entry(&self, position: usize) -> Option<&IndexedChunk> {
        self.entries.get(position)
    }

    pub fn get(&self, chunk_id: &str) -> Option<&IndexedChunk> {
        self.positions.get(chunk_id).map(|&i| &self.entries[i])
    }

    pub fn embedding(&self, position: usize) -> Option<&[f64]> {
        (position < self.len())
            .then(|| &self.vectors[position * self.dim..(position + 1) * self.dim])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&IndexedChunk, &[f64])> {
        self.entries
            .iter()
            .zip(self.vectors.chunks_exact(self.dim.max(1)))
    }

    /// Adds a batch atomically: either every chunk is stored or none is.
    pub fn add_chunks(
        &mut self,
        batch: Vec<(IndexedChunk, Embedding)>,
    ) -> Result<usize, IndexError> {
        let mut fresh = HashSet::with_capacity(batch.len());
        for (entry, emb) in &batch {
            if emb.dim() != self.dim {
                return Err(IndexError::DimensionMismatch {
                    expected: self.dim,
                    actual: emb.dim(),
                });
            }
            let id = entry.chunk.id();
            if self.positions.contains_key(&id) || !fresh.insert(id.clone()) {
                return Err(IndexError::DuplicateChunkId(id));
            }
        }
        let added = batch.len();
        for (entry, emb) in batch {
            let id = entry.chunk.id();
            self.norms.push(norm(&emb.0));
            self.vectors.extend_from_slice(&emb.0);
            self.doc_ids.insert(entry.chunk.doc_id.clone());
            self.positions.insert(id.clone(), self.ids.len());
            self.ids.push(id);
            self.entries.push(entry);
        }
        self.generation += 1;
        Ok(added)
    }

    /// Exact scan returning `min(k, len)` hits.
    pub fn search(
        &self,
        query: &Embedding,
        k: usize,
        metric: SimilarityMetric,
    ) -> Result<Vec<ScoredHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let q = query.as_slice();
        let q_norm = norm(q);
        let mut scored: Vec<(f64, usize)> = self
            .vectors
            .chunks_exact(self.dim.max(1))
            .take(self.len())
            .enumerate()
            .map(|(i, v)| {
                let score = match metric {
                    SimilarityMetric::Cosine => cosine_with_norms(dot(q, v), q_norm, self.norms[i]),
                    SimilarityMetric::Dot => dot(q, v),
                    SimilarityMetric::Euclidean => -squared_distance(q, v).sqrt(),
                };
                (score, i)
            })
            .collect();

        let by_rank = |a: &(f64, usize), b: &(f64, usize)| {
            compare_hits(a.0, &self.ids[a.1], b.0, &self.ids[b.1])
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k, by_rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_rank);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(r, (score, i))| ScoredHit {
                chunk_id: self.ids[i].clone(),
                score,
                rank: r + 1,
            })
            .collect())
    }

    /// Writes the snapshot container. See `docs/formats.md` for the layout.
    pub fn save<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&self.generation.to_le_bytes())?;
        for e in &self.entries {
            write_str(&mut w, &e.chunk.doc_id)?;
            w.write_all(&(e.chunk.index_in_doc as u32).to_le_bytes())?;
            w.write_all(&(e.chunk.token_count as u32).to_le_bytes())?;
            w.write_all(&e.chunk.published_at.timestamp().to_le_bytes())?;
            w.write_all(&[match e.origin {
                Origin::Local => 0,
                Origin::Web => 1,
            }])?;
            write_str(&mut w, &e.source)?;
            write_str(&mut w, &e.chunk.text)?;
        }
        for v in &self.vectors {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self, IndexError> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(IndexError::BadSnapshot("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != SNAPSHOT_VERSION {
            return Err(IndexError::BadSnapshot(format!(
                "unsupported version {version}"
            )));
        }
        let dim = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let generation = read_u64(&mut r)?;

        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let doc_id = read_str(&mut r)?;
            let index_in_doc = read_u32(&mut r)? as usize;
            let token_count = read_u32(&mut r)? as usize;
            let secs = read_u64(&mut r)? as i64;
            let published_at = DateTime::from_timestamp(secs, 0)
                .ok_or_else(|| IndexError::BadSnapshot(format!("timestamp {secs} out of range")))?;
            let mut origin = [0u8; 1];
            read_exact(&mut r, &mut origin)?;
            let origin = match origin[0] {
                0 => Origin::Local,
                1 => Origin::Web,
                b => return Err(IndexError::BadSnapshot(format!("bad origin byte {b}"))),
            };
            let source = read_str(&mut r)?;
            let text = read_str(&mut r)?;
            entries.push(IndexedChunk {
                chunk: Chunk {
                    doc_id,
                    index_in_doc,
                    text,
                    token_count,
                    published_at,
                },
                source,
                origin,
            });
        }
        let mut batch = Vec::with_capacity(count);
        let mut buf = vec![0u8; dim * 8];
        for entry in entries {
            read_exact(&mut r, &mut buf)?;
            let emb = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            batch.push((entry, Embedding(emb)));
        }
        let mut index = VectorIndex::new(dim);
        if !batch.is_empty() {
            index.add_chunks(batch)?;
        }
        index.generation = generation;
        Ok(index)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), IndexError> {
    r.read_exact(buf)
        .map_err(|e| IndexError::BadSnapshot(e.to_string()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, IndexError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, IndexError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, IndexError> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|e| IndexError::BadSnapshot(e.to_string()))
}
