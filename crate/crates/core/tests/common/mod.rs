//! Independent oracles and shared fixtures for integration and acceptance tests.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use chrono::{DateTime, TimeZone, Utc};
use finrag_core::corpus::read_jsonl_documents;
use finrag_core::encoder::{EncoderPair, TrainingExample, DEFAULT_SEED};
use finrag_core::prompting::rank;
use finrag_core::{
    chunk_document, Chunk, Document, FixtureClient, GateConfig, Origin, RetrievedParagraph,
};
use rand_chacha::ChaCha8Rng;

/// Threshold used with the fixture knowledge base and the tied encoder.
pub const FIXTURE_THRESHOLD: f64 = 0.3;
/// Scores above the threshold against the BYD fixture document.
pub const LOCAL_QUESTION: &str = "BYD sold new energy vehicles in June 2023";
/// Below the threshold locally; the web fixture has a matching page.
pub const WEB_QUESTION: &str = "What did the Federal Reserve decide about interest rates in July?";
pub const FED_URL: &str = "https://www.example-news.com/fed-july-decision";
pub const REPORT_URL: &str = "https://research.example.com/chip-outlook";
pub const BLANK_URL: &str = "https://blank.example.com/placeholder";
pub const UNKNOWN_URL: &str = "https://nowhere.example.com/missing";

pub const SYNTHETIC_EPOCHS: usize = 20;
pub const SYNTHETIC_LR: f64 = 0.1;
pub const SYNTHETIC_TRAIN_SEED: u64 = 1;

/// Works from any workspace crate that includes this module.
pub fn workspace_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixtures_dir() -> PathBuf {
    workspace_dir().join("fixtures")
}

pub fn fixture_documents() -> Vec<Document> {
    let f = File::open(fixtures_dir().join("kb/documents.jsonl")).expect("fixture kb");
    read_jsonl_documents(BufReader::new(f)).expect("fixture kb parses")
}

pub fn fixture_client() -> FixtureClient {
    FixtureClient::from_dir(fixtures_dir().join("web")).expect("web fixture")
}

pub fn fixture_encoder() -> EncoderPair {
    EncoderPair::tied(64, 2048, DEFAULT_SEED)
}

pub fn fixture_gate_config() -> GateConfig {
    GateConfig {
        threshold: FIXTURE_THRESHOLD,
        ..GateConfig::default()
    }
}

pub fn fixed_now() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2023, 7, 1, 12, 0, 0).unwrap()
}

// ---------------------------------------------------------------- search

pub fn oracle_score(metric: &str, a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    match metric {
        "dot" => dot,
        "cosine" => {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot / (na * nb)
            }
        }
        "euclidean" => -a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        other => panic!("unknown metric {other}"),
    }
}

/// Scores everything, sorts by (score desc, id asc), keeps `k`.
pub fn brute_force_top_k(
    metric: &str,
    query: &[f64],
    items: &[(String, Vec<f64>)],
    k: usize,
) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = items
        .iter()
        .map(|(id, v)| (id.clone(), oracle_score(metric, query, v)))
        .collect();
    all.sort_by(|a, b| match b.1.partial_cmp(&a.1).unwrap() {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    all.truncate(k);
    all
}

// ---------------------------------------------------------------- gradient

/// Largest relative error between the analytic gradient and central
/// differences over both matrices, for one example.
pub fn gradient_check(enc: &EncoderPair, example: &TrainingExample, eps: f64) -> f64 {
    let grads = enc.objective_gradient(example).unwrap();
    let (d, f, seed) = (enc.dim(), enc.feature_dim(), enc.seed());
    let key = enc.key_matrix().to_vec();
    let query = enc.query_matrix().to_vec();
    let eval = |k: &[f64], q: &[f64]| {
        EncoderPair::from_matrices(d, f, seed, k.to_vec(), q.to_vec())
            .unwrap()
            .example_objective(example)
    };
    let mut worst = 0.0f64;
    for which in 0..2 {
        let analytic = if which == 0 { &grads.key } else { &grads.query };
        for i in 0..d * f {
            let (mut plus_k, mut plus_q) = (key.clone(), query.clone());
            let (mut minus_k, mut minus_q) = (key.clone(), query.clone());
            if which == 0 {
                plus_k[i] += eps;
                minus_k[i] -= eps;
            } else {
                plus_q[i] += eps;
                minus_q[i] -= eps;
            }
            let numeric = (eval(&plus_k, &plus_q) - eval(&minus_k, &minus_q)) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    worst
}

pub const WORDS: [&str; 24] = [
    "revenue", "margin", "dividend", "yield", "bond", "equity", "rate", "hike", "bank", "loan",
    "credit", "cash", "profit", "loss", "share", "price", "index", "fund", "asset", "debt",
    "growth", "sales", "export", "tariff",
];

pub fn random_text(rng: &mut ChaCha8Rng) -> String {
    use rand::Rng;
    let n = rng.random_range(2..=6);
    (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Small random instance with O(1) weights so gradients are well away from zero.
pub fn gradient_instance(seed: u64) -> (EncoderPair, TrainingExample) {
    use rand::{Rng, SeedableRng};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=8);
    let f = rng.random_range(8..=32);
    let mut w = || {
        (0..d * f)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<f64>>()
    };
    let (k, q) = (w(), w());
    let enc = EncoderPair::from_matrices(d, f, seed, k, q).unwrap();
    let negatives = rng.random_range(0..=5);
    let example = TrainingExample {
        query_text: random_text(&mut rng),
        positive_text: random_text(&mut rng),
        negative_texts: (0..negatives).map(|_| random_text(&mut rng)).collect(),
    };
    (enc, example)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

// ---------------------------------------------------------------- metrics

/// AP@K straight from the definition: for every cutoff i <= K holding a
/// relevant item, count relevant items in ranked[..=i] by rescanning.
pub fn oracle_ap(ranked: &[u32], relevant: &[u32], k: usize) -> f64 {
    let rel: Vec<u32> = {
        let mut r = relevant.to_vec();
        r.sort_unstable();
        r.dedup();
        r
    };
    let is_rel = |x: &u32| rel.binary_search(x).is_ok();
    let cutoff = k.min(ranked.len());
    let mut total = 0.0;
    for i in 0..cutoff {
        if !is_rel(&ranked[i]) {
            continue;
        }
        let mut hits = 0;
        for item in &ranked[..=i] {
            if is_rel(item) {
                hits += 1;
            }
        }
        total += hits as f64 / (i + 1) as f64;
    }
    total / rel.len().min(k) as f64
}

pub fn oracle_recall(ranked: &[u32], relevant: &[u32], k: usize) -> f64 {
    let rel: HashSet<u32> = relevant.iter().copied().collect();
    let mut found = HashSet::new();
    for item in ranked.iter().take(k) {
        if rel.contains(item) {
            found.insert(*item);
        }
    }
    found.len() as f64 / rel.len() as f64
}

// ---------------------------------------------------------------- quantile

/// `p`-quantile by sorting and indexing ceil(p * n) - 1 with exact rational
/// arithmetic on p = num / den.
pub fn oracle_quantile(values: &[f64], num: u64, den: u64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as u64;
    let rank = (num * n).div_ceil(den).max(1);
    v[(rank - 1) as usize]
}

// ---------------------------------------------------------------- index

/// Index whose entry `i` has chunk id `{ids[i]}#0`.
pub fn index_from_vectors(
    dim: usize,
    ids: &[String],
    vectors: &[Vec<f64>],
) -> finrag_core::VectorIndex {
    use finrag_core::index::IndexedChunk;
    use finrag_core::{Chunk, Embedding, Origin};
    let mut index = finrag_core::VectorIndex::new(dim);
    let batch = ids
        .iter()
        .zip(vectors)
        .map(|(id, v)| {
            let chunk = Chunk {
                doc_id: id.clone(),
                index_in_doc: 0,
                text: format!("text of {id}"),
                token_count: 3,
                published_at: fixed_now(),
            };
            (
                IndexedChunk {
                    chunk,
                    source: "oracle".into(),
                    origin: Origin::Local,
                },
                Embedding(v.clone()),
            )
        })
        .collect();
    index.add_chunks(batch).unwrap();
    index
}

/// Random vectors; a third of them are drawn on a coarse integer grid so
/// that exact score ties occur.
pub fn random_vectors(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    use rand::Rng;
    (0..n)
        .map(|i| {
            (0..dim)
                .map(|_| {
                    if i % 3 == 0 {
                        rng.random_range(-2i32..=2) as f64
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------- prompts

pub const EN_QUESTION: &str = "How many EVs did BYD sell in Q1 2023?";
pub const ZH_QUESTION: &str = "比亚迪2023年第一季度卖了多少辆电动车？";
pub const EN_EMPTY_QUESTION: &str = "What is the latest ECB rate decision?";
pub const ZH_EMPTY_QUESTION: &str = "欧洲央行最近的利率决议是什么？";

pub fn golden_dir() -> PathBuf {
    workspace_dir().join("crates/core/tests/golden")
}

pub fn question_date() -> chrono::DateTime<Utc> {
    Utc.with_ymd_and_hms(2023, 7, 1, 0, 0, 0).unwrap()
}

/// Fixture documents as retrieved paragraphs with fixed scores, plus one web
/// paragraph, so that J = 3 of K = 5 leaves two extra citations.
pub fn fixture_results() -> Vec<RetrievedParagraph> {
    let scores = [0.82, 0.40, 0.33, 0.61];
    let mut out: Vec<RetrievedParagraph> = fixture_documents()
        .iter()
        .zip(scores)
        .map(|(doc, score)| {
            let chunk = chunk_document(doc, 250).unwrap().remove(0);
            RetrievedParagraph {
                published_at: chunk.published_at,
                chunk,
                score,
                provenance: Origin::Local,
                source: doc.source.clone(),
                source_url: None,
            }
        })
        .collect();
    out.push(RetrievedParagraph {
        chunk: Chunk {
            doc_id: "web-fed".into(),
            index_in_doc: 0,
            text: "The Federal Reserve raised interest rates by a quarter point in July.".into(),
            token_count: 13,
            published_at: Utc.with_ymd_and_hms(2023, 6, 28, 18, 0, 0).unwrap(),
        },
        score: 0.55,
        provenance: Origin::Web,
        source: "example-news.com".into(),
        source_url: Some(FED_URL.into()),
        published_at: Utc.with_ymd_and_hms(2023, 6, 28, 18, 0, 0).unwrap(),
    });
    rank(out)
}

/// `doc-00000`.. in shuffled order.
pub fn shuffled_ids(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    use rand::seq::SliceRandom;
    let mut ids: Vec<String> = (0..n).map(|i| format!("doc-{i:05}")).collect();
    ids.shuffle(rng);
    ids
}
