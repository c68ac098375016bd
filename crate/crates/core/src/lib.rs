//! Retrieval-augmented question answering over a local knowledge base with a
//! web-search fallback.
//!
//! The crate covers the full pipeline: document chunking, a trainable dual
//! encoder, an exact vector index, the threshold gate between local and web
//! retrieval, prompt assembly with citations, pluggable generation backends
//! and retrieval evaluation.

pub mod corpus;
pub mod encoder;
pub mod evaluation;
pub mod gate;
pub mod generation;
pub mod index;
pub mod pipeline;
pub mod prompting;
pub mod synthetic;
pub mod websearch;

pub use corpus::{
    chunk_document, tokenize, Chunk, CorpusError, Document, Origin, DEFAULT_CHUNK_LIMIT,
};
pub use encoder::{
    Embedding, EncoderError, EncoderPair, FeatureVector, TrainingExample, TrainingReport,
};
pub use evaluation::{
    average_precision_at_k, recall_at_k, run_benchmark, EvalError, EvalReport, Judgment,
};
pub use gate::{
    calibrate_threshold, Calibration, Gate, GateConfig, GateError, GateTrace, HoldoutPair,
    RetrievedParagraph,
};
pub use generation::{
    GenerationBackend, GenerationError, GenerationRequest, HttpBackend, StubBackend,
};
pub use index::{IndexError, ScoredHit, SimilarityMetric, VectorIndex};
pub use pipeline::{
    ChatOptions, ChatRequest, ChatResponse, Pipeline, PipelineError, PipelineSettings,
};
pub use prompting::{build_prompt, Citation, PromptBundle, PromptConfig, TemplateLanguage};
pub use websearch::{FixtureClient, HttpSearchClient, SearchClient, WebError};
