//! Seeded synthetic retrieval corpus.
//!
//! Every chunk is one sentence of distinct words drawn from a shared
//! vocabulary, and each query is a subset of its chunk's words. Lexical
//! overlap therefore identifies the relevant chunk, which a trained encoder
//! can learn and an untrained one cannot see.

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{chunk_id, Document, Origin};
use crate::encoder::TrainingExample;
use crate::evaluation::Judgment;
use crate::gate::HoldoutPair;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub documents: usize,
    pub chunks_per_document: usize,
    pub vocabulary: usize,
    pub words_per_chunk: usize,
    pub words_per_query: usize,
    pub heldout_queries: usize,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            documents: 200,
            chunks_per_document: 5,
            vocabulary: 400,
            words_per_chunk: 10,
            words_per_query: 4,
            heldout_queries: 100,
            negatives: 5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub documents: Vec<Document>,
    /// Chunk limit that keeps every sentence in its own chunk.
    pub chunk_limit: usize,
    pub training: Vec<TrainingExample>,
    /// One judgment per held-out chunk.
    pub judgments: Vec<Judgment>,
    /// Two fresh queries per held-out chunk, for threshold calibration.
    pub holdout: Vec<HoldoutPair>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn syllable(i: usize) -> [u8; 2] {
    [
        CONSONANTS[i / VOWELS.len() % CONSONANTS.len()],
        VOWELS[i % VOWELS.len()],
    ]
}

/// Deterministic pronounceable word for a vocabulary slot.
pub fn vocabulary_word(i: usize) -> String {
    let n = CONSONANTS.len() * VOWELS.len();
    let mut out = Vec::with_capacity(6);
    out.extend_from_slice(&syllable(i % n));
    out.extend_from_slice(&syllable((i / n + 3 * i) % n));
    out.extend_from_slice(&syllable(i / (n * n) + 11));
    String::from_utf8(out).expect("ascii")
}

fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2023, 1, 1, 9, 0, 0)
        .single()
        .expect("valid date")
}

impl SyntheticCorpus {
    pub fn generate(cfg: &SyntheticConfig) -> Self {
        assert!(
            cfg.words_per_query <= cfg.words_per_chunk && cfg.words_per_chunk <= cfg.vocabulary
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let vocab: Vec<String> = (0..cfg.vocabulary).map(vocabulary_word).collect();

        let mut documents = Vec::with_capacity(cfg.documents);
        // (chunk id, words) in corpus order
        let mut chunks: Vec<(String, Vec<usize>)> = Vec::new();
        for d in 0..cfg.documents {
            let id = format!("syn-{d:04}");
            let mut sentences = Vec::with_capacity(cfg.chunks_per_document);
            for c in 0..cfg.chunks_per_document {
                let words = rand::seq::index::sample(&mut rng, cfg.vocabulary, cfg.words_per_chunk)
                    .into_vec();
                let mut sentence = words
                    .iter()
                    .map(|&w| vocab[w].as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                sentence.push('.');
                sentences.push(sentence);
                chunks.push((chunk_id(&id, c), words));
            }
            documents.push(Document {
                id: id.clone(),
                published_at: epoch() + Duration::days(d as i64),
                title: format!("Synthetic report {d}"),
                summary: sentences.join(" "),
                topics: vec!["synthetic".into()],
                source: "synthetic".into(),
                origin: Origin::Local,
            });
        }

        let mut order: Vec<usize> = (0..chunks.len()).collect();
        order.shuffle(&mut rng);
        let heldout_n = cfg.heldout_queries.min(chunks.len());
        let (heldout, train) = order.split_at(heldout_n);
        let mut heldout = heldout.to_vec();
        heldout.sort_unstable();

        let text_of = |words: &[usize]| {
            words
                .iter()
                .map(|&w| vocab[w].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let query_of = |rng: &mut ChaCha8Rng, words: &[usize]| {
            let picked: Vec<usize> = words
                .choose_multiple(rng, cfg.words_per_query)
                .copied()
                .collect();
            format!("{}?", text_of(&picked))
        };

        let mut training = Vec::with_capacity(train.len());
        for &i in train {
            let query_text = query_of(&mut rng, &chunks[i].1);
            let mut negative_texts = Vec::with_capacity(cfg.negatives);
            while negative_texts.len() < cfg.negatives {
                let j = train[rng.random_range(0..train.len())];
                if j != i {
                    negative_texts.push(text_of(&chunks[j].1));
                }
            }
            training.push(TrainingExample {
                query_text,
                positive_text: text_of(&chunks[i].1),
                negative_texts,
            });
        }

        let judgments = heldout
            .iter()
            .enumerate()
            .map(|(n, &i)| Judgment {
                query_id: format!("q{n:03}"),
                query_text: query_of(&mut rng, &chunks[i].1),
                relevant_chunk_ids: vec![chunks[i].0.clone()],
            })
            .collect();

        let mut holdout = Vec::with_capacity(heldout.len() * 2);
        for &i in &heldout {
            for _ in 0..2 {
                holdout.push(HoldoutPair {
                    query_text: query_of(&mut rng, &chunks[i].1),
                    positive_text: text_of(&chunks[i].1),
                });
            }
        }

        Self {
            documents,
            chunk_limit: cfg.words_per_chunk,
            training,
            judgments,
            holdout,
        }
    }
}
