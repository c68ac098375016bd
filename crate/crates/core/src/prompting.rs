//! Ranking, prompt assembly with temporal grounding, and citations.
//!
//! Only the top `J` ranked paragraphs go into the prompt, one per line as
//! `"{YYYY-MM-DD HH:MM:SS}:{text}"`. The remaining paragraphs are offered as
//! additional citations.

use std::cmp::Ordering;
use std::collections::HashSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::{format_timestamp, is_cjk, Origin};
use crate::gate::RetrievedParagraph;

pub const DEFAULT_J: usize = 3;
/// Version tag of the bundled template assets.
pub const TEMPLATE_VERSION: &str = "v1";
pub const LOCAL_CITATION_LABEL: &str = "Local Doc";

const ENGLISH_TEMPLATE: &str = include_str!("../assets/templates/en.v1.txt");
const CHINESE_TEMPLATE: &str = include_str!("../assets/templates/zh.v1.txt");
const ENGLISH_NO_CONTEXT: &str = "No relevant information was retrieved for this question.";
const CHINESE_NO_CONTEXT: &str = "未检索到与该问题相关的信息。";

/// Share of CJK characters (whitespace excluded) at which `Auto` picks Chinese.
pub const CJK_RATIO_THRESHOLD: f64 = 0.3;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("j must be at least 1 and less than k (j={j}, k={k})")]
    InvalidJ { j: usize, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateLanguage {
    #[default]
    Auto,
    English,
    Chinese,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub j: usize,
    pub template_language: TemplateLanguage,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            j: DEFAULT_J,
            template_language: TemplateLanguage::Auto,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self, k: usize) -> Result<(), PromptError> {
        if self.j == 0 || self.j >= k {
            return Err(PromptError::InvalidJ { j: self.j, k });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub prompt_text: String,
    pub used: Vec<RetrievedParagraph>,
    pub extra_citations: Vec<RetrievedParagraph>,
    pub question_date: DateTime<Utc>,
    pub language: TemplateLanguage,
}

/// Score descending; ties go local before web, then ascending chunk id.
pub fn compare_paragraphs(a: &RetrievedParagraph, b: &RetrievedParagraph) -> Ordering {
    (b.score + 0.0)
        .total_cmp(&(a.score + 0.0))
        .then_with(|| a.provenance.cmp(&b.provenance))
        .then_with(|| a.chunk_id().cmp(&b.chunk_id()))
}

pub fn rank(mut results: Vec<RetrievedParagraph>) -> Vec<RetrievedParagraph> {
    results.sort_by(compare_paragraphs);
    results
}

pub fn cjk_ratio(text: &str) -> f64 {
    let (mut total, mut cjk) = (0usize, 0usize);
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        total += 1;
        if is_cjk(c) {
            cjk += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        cjk as f64 / total as f64
    }
}

pub fn resolve_language(question: &str, requested: TemplateLanguage) -> TemplateLanguage {
    match requested {
        TemplateLanguage::Auto if cjk_ratio(question) >= CJK_RATIO_THRESHOLD => {
            TemplateLanguage::Chinese
        }
        TemplateLanguage::Auto => TemplateLanguage::English,
        other => other,
    }
}

/// Single-pass `{NAME}` substitution; substituted text is never rescanned.
fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            vars.iter()
                .find(|(name, _)| *name == &after[..close])
                .map(|(_, v)| (close, v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn context_line(p: &RetrievedParagraph) -> String {
    let text = p
        .chunk
        .text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    format!("{}:{}", format_timestamp(&p.published_at), text)
}

pub fn build_prompt(
    ranked: &[RetrievedParagraph],
    question: &str,
    question_date: DateTime<Utc>,
    cfg: &PromptConfig,
) -> PromptBundle {
    let language = resolve_language(question, cfg.template_language);
    let take = cfg.j.min(ranked.len());
    let used = ranked[..take].to_vec();
    let extra_citations = ranked[take..].to_vec();

    let (template, empty) = match language {
        TemplateLanguage::Chinese => (CHINESE_TEMPLATE, CHINESE_NO_CONTEXT),
        _ => (ENGLISH_TEMPLATE, ENGLISH_NO_CONTEXT),
    };
    let context = if used.is_empty() {
        empty.to_string()
    } else {
        used.iter().map(context_line).collect::<Vec<_>>().join("\n")
    };
    let question_line = question.split_whitespace().collect::<Vec<_>>().join(" ");
    let date = format_timestamp(&question_date);
    let prompt_text = fill(
        template.strip_suffix('\n').unwrap_or(template),
        &[
            ("CONTEXT", &context),
            ("QUESTION_DATE", &date),
            ("QUESTION", &question_line),
        ],
    );

    PromptBundle {
        prompt_text,
        used,
        extra_citations,
        question_date,
        language,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Citation {
    pub label: String,
    /// Source url for web paragraphs, `"local"` for knowledge-base documents.
    pub url_or_local: String,
    pub rank: usize,
    pub provenance: Origin,
}

/// Citations for used paragraphs then extras. Web sources are keyed by url,
/// all local paragraphs share one `[Local Doc]` entry; repeats keep their
/// first position.
pub fn citations(bundle: &PromptBundle) -> Vec<Citation> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for p in bundle.used.iter().chain(&bundle.extra_citations) {
        let (label, target, provenance) = match (&p.source_url, p.provenance) {
            (Some(url), Origin::Web) => (p.source.clone(), url.clone(), Origin::Web),
            (None, Origin::Web) => (p.source.clone(), p.source.clone(), Origin::Web),
            (_, Origin::Local) => (
                LOCAL_CITATION_LABEL.to_string(),
                "local".to_string(),
                Origin::Local,
            ),
        };
        if seen.insert(target.clone()) {
            out.push(Citation {
                label,
                url_or_local: target,
                rank: out.len() + 1,
                provenance,
            });
        }
    }
    out
}

/// `"More Details: 1. [A], 2. [B]."`, or empty when nothing was retrieved.
pub fn format_citations(bundle: &PromptBundle) -> String {
    render_citations(&citations(bundle))
}

pub fn render_citations(citations: &[Citation]) -> String {
    if citations.is_empty() {
        return String::new();
    }
    let items: Vec<String> = citations
        .iter()
        .map(|c| format!("{}. [{}]", c.rank, c.label))
        .collect();
    format!("More Details: {}.", items.join(", "))
}
