//! The question-answering pipeline shared by the CLI and the HTTP service:
//! gated retrieval, ranking, prompt assembly, generation and citations.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use chrono::{DateTime, NaiveDate, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::corpus::{parse_timestamp, Document, Origin};
use crate::encoder::EncoderPair;
use crate::gate::{ingest_document, Gate, GateConfig, GateError, GateTrace, SaveOutcome};
use crate::generation::{
    GenerationBackend, GenerationError, GenerationRequest, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE,
};
use crate::index::{IndexError, SimilarityMetric, VectorIndex};
use crate::prompting::{
    build_prompt, citations, rank, render_citations, Citation, PromptConfig, PromptError,
    TemplateLanguage,
};
use crate::websearch::SearchClient;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
}

impl PipelineError {
    /// True when the caller sent something the pipeline refuses to run.
    pub fn is_client_error(&self) -> bool {
        matches!(
            self,
            PipelineError::InvalidRequest(_)
                | PipelineError::Prompt(_)
                | PipelineError::Gate(GateError::InvalidConfig(_) | GateError::NoSources)
                | PipelineError::Generation(GenerationError::InvalidRequest(_))
        )
    }
}

/// Per-request overrides of the pipeline defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_kb: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_web: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<SimilarityMetric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_update: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_language: Option<TemplateLanguage>,
    /// Include the assembled prompt in the response.
    #[serde(default)]
    pub debug: bool,
    /// Include wall-clock stage timings in the response.
    #[serde(default)]
    pub timings: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRequest {
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_date: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<ChatOptions>,
}

impl ChatRequest {
    pub fn new(question: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            question_date: None,
            options: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedView {
    pub chunk_id: String,
    pub score: f64,
    pub provenance: Origin,
    pub published_at: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_url: Option<String>,
    pub text: String,
    /// Whether the paragraph went into the prompt (the rest are extra citations).
    pub in_prompt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub answer: String,
    pub citations: Vec<Citation>,
    pub citation_text: String,
    pub retrieved: Vec<RetrievedView>,
    pub gate: GateTrace,
    pub question_date: String,
    pub timings: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

/// Accepts RFC 3339, `YYYY-MM-DD HH:MM:SS` (UTC) or a bare `YYYY-MM-DD`.
pub fn parse_question_date(s: &str) -> Result<DateTime<Utc>, PipelineError> {
    let s = s.trim();
    if let Ok(ts) = DateTime::parse_from_rfc3339(s) {
        return Ok(ts.with_timezone(&Utc));
    }
    if let Ok(ts) = parse_timestamp(s) {
        return Ok(ts);
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc());
    }
    Err(PipelineError::InvalidRequest(format!(
        "unparseable question_date {s:?}"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSettings {
    pub gate: GateConfig,
    pub prompt: PromptConfig,
    pub max_tokens: usize,
    pub temperature: f64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            gate: GateConfig::default(),
            prompt: PromptConfig::default(),
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl PipelineSettings {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.gate.validate()?;
        self.prompt.validate(self.gate.k)?;
        Ok(())
    }

    /// Settings with request overrides applied and validated.
    pub fn with_options(&self, o: &ChatOptions) -> Result<Self, PipelineError> {
        let mut s = self.clone();
        if let Some(k) = o.k {
            s.gate.k = k;
        }
        if let Some(j) = o.j {
            s.prompt.j = j;
        }
        if let Some(v) = o.use_kb {
            s.gate.use_kb = v;
        }
        if let Some(v) = o.use_web {
            s.gate.use_web = v;
        }
        if let Some(m) = o.metric {
            s.gate.metric = m;
        }
        if let Some(v) = o.auto_update {
            s.gate.auto_update = v;
        }
        if let Some(l) = o.template_language {
            s.prompt.template_language = l;
        }
        if let Some(n) = o.max_tokens {
            if n == 0 {
                return Err(PipelineError::InvalidRequest(
                    "max_tokens must be at least 1".into(),
                ));
            }
            s.max_tokens = n;
        }
        s.validate()?;
        Ok(s)
    }
}

/// Everything a question needs: encoder, knowledge base, web client and
/// generation backend.
pub struct Pipeline {
    pub encoder: Arc<EncoderPair>,
    pub kb: Arc<RwLock<VectorIndex>>,
    pub client: Arc<dyn SearchClient>,
    pub backend: Arc<dyn GenerationBackend>,
    pub settings: PipelineSettings,
    pub clock: fn() -> DateTime<Utc>,
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}

impl Pipeline {
    pub fn new(
        encoder: Arc<EncoderPair>,
        kb: Arc<RwLock<VectorIndex>>,
        client: Arc<dyn SearchClient>,
        backend: Arc<dyn GenerationBackend>,
        settings: PipelineSettings,
    ) -> Result<Self, PipelineError> {
        settings.validate()?;
        if encoder.dim() != kb.read().dim() {
            return Err(GateError::from(IndexError::DimensionMismatch {
                expected: kb.read().dim(),
                actual: encoder.dim(),
            })
            .into());
        }
        Ok(Self {
            encoder,
            kb,
            client,
            backend,
            settings,
            clock: Utc::now,
        })
    }

    pub fn with_clock(mut self, clock: fn() -> DateTime<Utc>) -> Self {
        self.clock = clock;
        self
    }

    fn gate(&self) -> Gate<'_> {
        Gate::new(&self.encoder, &self.kb, self.client.as_ref()).with_clock(self.clock)
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, PipelineError> {
        if request.question.trim().is_empty() {
            return Err(PipelineError::InvalidRequest(
                "question must not be empty".into(),
            ));
        }
        let options = request.options.clone().unwrap_or_default();
        let settings = self.settings.with_options(&options)?;
        let question_date = match &request.question_date {
            Some(s) => parse_question_date(s)?,
            None => (self.clock)(),
        };

        let (results, mut trace) = self
            .gate()
            .with_as_of(question_date)
            .retrieve(&request.question, &settings.gate)?;
        let mut timings = std::mem::take(&mut trace.timings);

        let start = Instant::now();
        let ranked = rank(results);
        let bundle = build_prompt(&ranked, &request.question, question_date, &settings.prompt);
        timings.insert("prompt".into(), elapsed_ms(start));

        let start = Instant::now();
        let generation = GenerationRequest {
            prompt: bundle.prompt_text.clone(),
            max_tokens: settings.max_tokens,
            temperature: settings.temperature,
            stop: None,
        };
        let answer = self.backend.generate(&generation)?;
        timings.insert("generation".into(), elapsed_ms(start));

        let cites = citations(&bundle);
        let retrieved = bundle
            .used
            .iter()
            .map(|p| (p, true))
            .chain(bundle.extra_citations.iter().map(|p| (p, false)))
            .map(|(p, in_prompt)| RetrievedView {
                chunk_id: p.chunk_id(),
                score: p.score,
                provenance: p.provenance,
                published_at: crate::corpus::format_timestamp(&p.published_at),
                source: p.source.clone(),
                source_url: p.source_url.clone(),
                text: p.chunk.text.clone(),
                in_prompt,
            })
            .collect();

        Ok(ChatResponse {
            answer,
            citation_text: render_citations(&cites),
            citations: cites,
            retrieved,
            gate: trace,
            question_date: crate::corpus::format_timestamp(&bundle.question_date),
            timings: if options.timings {
                timings
            } else {
                BTreeMap::new()
            },
            prompt: options.debug.then_some(bundle.prompt_text),
        })
    }

    pub fn ingest(&self, doc: &Document) -> Result<usize, GateError> {
        ingest_document(&self.encoder, &self.kb, doc, self.settings.gate.chunk_limit)
    }

    pub fn save_web(&self, url: &str) -> Result<SaveOutcome, GateError> {
        self.gate()
            .save_web_document(url, self.settings.gate.chunk_limit)
    }

    pub fn search(
        &self,
        q: &str,
        k: usize,
        metric: SimilarityMetric,
    ) -> Result<Vec<SearchHitView>, IndexError> {
        let query = self.encoder.embed_query_text(q);
        let kb = self.kb.read();
        Ok(kb
            .search(&query, k, metric)?
            .into_iter()
            .map(|hit| {
                let entry = kb.get(&hit.chunk_id).expect("hit refers to a stored chunk");
                SearchHitView {
                    chunk_id: hit.chunk_id,
                    score: hit.score,
                    rank: hit.rank,
                    text: entry.chunk.text.clone(),
                    published_at: crate::corpus::format_timestamp(&entry.chunk.published_at),
                    source: entry.source.clone(),
                    origin: entry.origin,
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHitView {
    pub chunk_id: String,
    pub score: f64,
    pub rank: usize,
    pub text: String,
    pub published_at: String,
    pub source: String,
    pub origin: Origin,
}
