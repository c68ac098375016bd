//! Input builders shared by the benchmarks.

use chrono::{TimeZone, Utc};
use finrag_core::index::IndexedChunk;
use finrag_core::{Chunk, Embedding, Origin, TrainingExample, VectorIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 16] = [
    "revenue", "margin", "dividend", "yield", "bond", "equity", "rate", "bank", "loan", "credit",
    "profit", "share", "index", "fund", "debt", "growth",
];

pub fn random_embedding(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
    Embedding((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Index of `n` uniformly random vectors.
pub fn random_index(n: usize, dim: usize, seed: u64) -> VectorIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let published_at = Utc.with_ymd_and_hms(2023, 7, 1, 0, 0, 0).unwrap();
    let batch = (0..n)
        .map(|i| {
            let chunk = Chunk {
                doc_id: format!("doc-{i:06}"),
                index_in_doc: 0,
                text: String::new(),
                token_count: 0,
                published_at,
            };
            let entry = IndexedChunk {
                chunk,
                source: String::new(),
                origin: Origin::Local,
            };
            (entry, random_embedding(&mut rng, dim))
        })
        .collect();
    let mut index = VectorIndex::new(dim);
    index.add_chunks(batch).expect("fresh ids");
    index
}

pub fn random_text(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn training_example(seed: u64, negatives: usize) -> TrainingExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TrainingExample {
        query_text: random_text(&mut rng, 8),
        positive_text: random_text(&mut rng, 40),
        negative_texts: (0..negatives).map(|_| random_text(&mut rng, 40)).collect(),
    }
}

/// Mixed English and Chinese text of roughly `words` tokens.
pub fn mixed_text(words: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = random_text(&mut rng, words);
    out.push_str(" 比亚迪第二季度营业收入同比增长，净利润率提高。");
    out
}
