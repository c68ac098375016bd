mod common;

use finrag_core::gate::{calibrate_threshold, ingest_document, nearest_rank, GateError};
use finrag_core::synthetic::{SyntheticConfig, SyntheticCorpus};
use finrag_core::websearch::{FetchedPage, SearchResult};
use finrag_core::{
    EncoderPair, Gate, Origin, SearchClient, SimilarityMetric, VectorIndex, WebError,
};
use parking_lot::RwLock;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn fixture_kb(enc: &EncoderPair) -> RwLock<VectorIndex> {
    let kb = RwLock::new(VectorIndex::new(enc.dim()));
    for doc in fixture_documents() {
        ingest_document(enc, &kb, &doc, 250).unwrap();
    }
    kb
}

#[test]
fn local_hit_skips_the_web() {
    let enc = fixture_encoder();
    let kb = fixture_kb(&enc);
    let client = fixture_client();
    let gate = Gate::new(&enc, &kb, &client).with_clock(fixed_now);
    let (results, trace) = gate
        .retrieve(LOCAL_QUESTION, &fixture_gate_config())
        .unwrap();
    assert!(trace.local_max_score.unwrap() > FIXTURE_THRESHOLD);
    assert_eq!(client.search_calls(), 0);
    assert_eq!(trace.web_calls, 0);
    assert!(!trace.web_search_performed);
    assert_eq!(results[0].chunk.doc_id, "byd-2023-06");
}

#[test]
fn weak_local_match_searches_the_web_once() {
    let enc = fixture_encoder();
    let kb = fixture_kb(&enc);
    let client = fixture_client();
    let gate = Gate::new(&enc, &kb, &client).with_clock(fixed_now);
    let cfg = finrag_core::GateConfig {
        auto_update: false,
        ..fixture_gate_config()
    };
    let (results, trace) = gate.retrieve(WEB_QUESTION, &cfg).unwrap();
    assert!(trace.local_max_score.unwrap() <= FIXTURE_THRESHOLD);
    assert_eq!(client.search_calls(), 1);
    assert_eq!(trace.web_calls, 1);
    assert_eq!(trace.kb_documents_added, 0);
    let top = &results[0];
    assert_eq!(top.provenance, Origin::Web);
    assert_eq!(top.source_url.as_deref(), Some(FED_URL));
    assert_eq!(top.source, "example-news.com");
    assert!(results.len() <= 2 * cfg.k);
}

#[test]
fn qualifying_web_document_is_cached() {
    let enc = fixture_encoder();
    let kb = fixture_kb(&enc);
    let before = kb.read().len();
    let client = fixture_client();
    let gate = Gate::new(&enc, &kb, &client).with_clock(fixed_now);
    let cfg = fixture_gate_config();

    let (_, first) = gate.retrieve(WEB_QUESTION, &cfg).unwrap();
    assert_eq!(first.web_calls, 1);
    assert!(first.kb_documents_added >= 1);
    assert!(kb
        .read()
        .contains_document(&finrag_core::gate::web_document_id(FED_URL)));
    assert!(kb.read().len() > before);

    let (second_results, second) = gate.retrieve(WEB_QUESTION, &cfg).unwrap();
    assert_eq!(second.web_calls, 0);
    assert_eq!(client.search_calls(), 1);
    let top = &second_results[0];
    assert_eq!(top.provenance, Origin::Local);
    assert_eq!(top.source_url.as_deref(), Some(FED_URL));
}

#[test]
fn ablations() {
    let enc = fixture_encoder();
    let kb = fixture_kb(&enc);
    let client = fixture_client();
    let gate = Gate::new(&enc, &kb, &client).with_clock(fixed_now);

    let no_web = finrag_core::GateConfig {
        use_web: false,
        ..fixture_gate_config()
    };
    let (results, trace) = gate.retrieve(WEB_QUESTION, &no_web).unwrap();
    assert_eq!(client.search_calls(), 0);
    assert_eq!(trace.web_calls, 0);
    assert!(results.iter().all(|p| p.provenance == Origin::Local));

    let no_kb = finrag_core::GateConfig {
        use_kb: false,
        auto_update: false,
        ..fixture_gate_config()
    };
    let (results, trace) = gate.retrieve(LOCAL_QUESTION, &no_kb).unwrap();
    assert_eq!(trace.local_max_score, None);
    assert_eq!(trace.web_calls, 1);
    assert!(results.iter().all(|p| p.provenance == Origin::Web));

    let neither = finrag_core::GateConfig {
        use_kb: false,
        use_web: false,
        ..fixture_gate_config()
    };
    assert_eq!(
        gate.retrieve(LOCAL_QUESTION, &neither).unwrap_err(),
        GateError::NoSources
    );
}

#[test]
fn empty_kb_goes_to_the_web() {
    let enc = fixture_encoder();
    let kb = RwLock::new(VectorIndex::new(enc.dim()));
    let client = fixture_client();
    let gate = Gate::new(&enc, &kb, &client).with_clock(fixed_now);
    let (_, trace) = gate.retrieve(WEB_QUESTION, &fixture_gate_config()).unwrap();
    assert_eq!(trace.local_max_score, None);
    assert_eq!(trace.web_calls, 1);
}

struct BrokenSearch;

impl SearchClient for BrokenSearch {
    fn search(&self, _: &str, _: usize) -> Result<Vec<SearchResult>, WebError> {
        Err(WebError::Timeout)
    }

    fn fetch(&self, url: &str) -> Result<FetchedPage, WebError> {
        Err(WebError::FetchFailed {
            url: url.into(),
            reason: "down".into(),
        })
    }
}

#[test]
fn web_failure_degrades_to_local() {
    let enc = fixture_encoder();
    let kb = fixture_kb(&enc);
    let gate = Gate::new(&enc, &kb, &BrokenSearch);
    let (results, trace) = gate.retrieve(WEB_QUESTION, &fixture_gate_config()).unwrap();
    assert!(trace.web_degraded);
    assert!(trace.web_error.is_some());
    assert_eq!(results.len(), 4);
    assert!(results.iter().all(|p| p.provenance == Origin::Local));
}

#[test]
fn unfetchable_result_falls_back_to_snippet() {
    let enc = fixture_encoder();
    let kb = RwLock::new(VectorIndex::new(enc.dim()));
    let client = fixture_client();
    let gate = Gate::new(&enc, &kb, &client).with_clock(fixed_now);
    let cfg = finrag_core::GateConfig {
        use_kb: false,
        auto_update: false,
        k: 10,
        ..fixture_gate_config()
    };
    let (results, _) = gate.retrieve(WEB_QUESTION, &cfg).unwrap();
    let preview = results
        .iter()
        .find(|p| p.source_url.as_deref() == Some("https://gone.example.net/fed-preview"))
        .expect("snippet paragraph present");
    assert_eq!(
        preview.chunk.text,
        "Analysts previewed the July meeting of the Federal Reserve."
    );
    assert_eq!(preview.published_at, fixed_now());
}

#[test]
fn as_of_dates_undated_results() {
    let enc = fixture_encoder();
    let kb = RwLock::new(VectorIndex::new(enc.dim()));
    let client = fixture_client();
    let as_of = chrono::TimeZone::with_ymd_and_hms(&chrono::Utc, 2023, 7, 30, 0, 0, 0).unwrap();
    let gate = Gate::new(&enc, &kb, &client)
        .with_clock(fixed_now)
        .with_as_of(as_of);
    let cfg = finrag_core::GateConfig {
        use_kb: false,
        auto_update: false,
        k: 10,
        ..fixture_gate_config()
    };
    let (results, _) = gate.retrieve(WEB_QUESTION, &cfg).unwrap();
    let dated = |url: &str| {
        results
            .iter()
            .find(|p| p.source_url.as_deref() == Some(url))
            .unwrap()
            .published_at
    };
    assert_eq!(dated("https://gone.example.net/fed-preview"), as_of);
    assert_ne!(dated(FED_URL), as_of);
}

#[test]
fn save_web_document_cases() {
    let enc = fixture_encoder();
    let kb = RwLock::new(VectorIndex::new(enc.dim()));
    let client = fixture_client();
    let gate = Gate::new(&enc, &kb, &client).with_clock(fixed_now);

    let first = gate.save_web_document(REPORT_URL, 250).unwrap();
    assert_eq!((first.chunk_count, first.already_present), (3, false));
    let counts: Vec<usize> = kb.read().iter().map(|(c, _)| c.chunk.token_count).collect();
    assert_eq!(counts, [250, 250, 100]);
    let fetches = client.fetch_calls();
    let again = gate.save_web_document(REPORT_URL, 250).unwrap();
    assert!(again.already_present);
    assert_eq!(again.id, first.id);
    assert_eq!(client.fetch_calls(), fetches);

    assert!(matches!(
        gate.save_web_document(UNKNOWN_URL, 250),
        Err(GateError::Web(WebError::FetchFailed { .. }))
    ));
    assert_eq!(
        gate.save_web_document(BLANK_URL, 250),
        Err(GateError::EmptyDocument)
    );
}

#[test]
fn ingest_errors() {
    let enc = fixture_encoder();
    let kb = fixture_kb(&enc);
    let docs = fixture_documents();
    assert!(matches!(
        ingest_document(&enc, &kb, &docs[0], 250),
        Err(GateError::DuplicateDocument(_))
    ));
    let mut empty = docs[0].clone();
    empty.id = "empty".into();
    empty.summary = " ".into();
    assert_eq!(
        ingest_document(&enc, &kb, &empty, 250),
        Err(GateError::EmptyDocument)
    );
}

#[test]
fn nearest_rank_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let values: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    for &(num, den) in &[
        (1u64, 100u64),
        (1, 1000),
        (7, 100),
        (1, 2),
        (99, 100),
        (1, 3),
    ] {
        let p = num as f64 / den as f64;
        assert_eq!(
            nearest_rank(&sorted, p),
            oracle_quantile(&values, num, den),
            "p = {num}/{den}"
        );
    }
}

#[test]
fn calibration_on_200_pairs_picks_second_smallest() {
    let corpus = SyntheticCorpus::generate(&SyntheticConfig::default());
    assert_eq!(corpus.holdout.len(), 200);
    let enc = fixture_encoder();
    let cal = calibrate_threshold(&enc, &corpus.holdout, SimilarityMetric::Cosine, 0.01).unwrap();
    let mut sims: Vec<f64> = corpus
        .holdout
        .iter()
        .map(|p| {
            let q = enc.embed_query_text(&p.query_text);
            let e = enc.embed_key_text(&p.positive_text);
            oracle_score("cosine", q.as_slice(), e.as_slice())
        })
        .collect();
    sims.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!(sims[1] > 0.0 && sims[1] < 1.0);
    assert!((cal.threshold - sims[1]).abs() < 1e-12);
    assert_eq!(cal.n, 200);
    assert_eq!(cal.histogram.counts.iter().sum::<usize>(), 200);

    let one =
        calibrate_threshold(&enc, &corpus.holdout[..1], SimilarityMetric::Cosine, 0.01).unwrap();
    let p = &corpus.holdout[0];
    let only = oracle_score(
        "cosine",
        enc.embed_query_text(&p.query_text).as_slice(),
        enc.embed_key_text(&p.positive_text).as_slice(),
    );
    assert!((one.threshold - only).abs() < 1e-12);
    assert_eq!(one.n, 1);
    assert_eq!(
        calibrate_threshold(&enc, &corpus.holdout, SimilarityMetric::Cosine, 1.5).unwrap_err(),
        GateError::InvalidQuantile
    );
}
