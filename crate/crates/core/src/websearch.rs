//! Web search and page fetch behind a small trait.
//!
//! [`FixtureClient`] serves canned results from a directory and counts calls;
//! [`HttpSearchClient`] talks to any endpoint that returns a JSON array of
//! `{url, title, snippet}` objects.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::fnv1a64;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum WebError {
    #[error("bad fixture: {0}")]
    BadFixtureFormat(String),
    #[error("fetch failed for {url}: {reason}")]
    FetchFailed { url: String, reason: String },
    #[error("request timed out")]
    Timeout,
    #[error("server returned status {0}")]
    NonSuccessStatus(u16),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("transport error: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub url: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub snippet: String,
    #[serde(default)]
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub published_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchedPage {
    pub text: String,
    pub published_at: Option<DateTime<Utc>>,
}

pub trait SearchClient: Send + Sync {
    /// At most `n` results, ranked from 1.
    fn search(&self, query: &str, n: usize) -> Result<Vec<SearchResult>, WebError>;

    fn fetch(&self, url: &str) -> Result<FetchedPage, WebError>;
}

/// File name of a fixture page body: FNV-1a-64 of the url, 16 hex digits.
pub fn fixture_page_name(url: &str) -> String {
    format!("{:016x}.txt", fnv1a64(url.as_bytes()))
}

fn rerank(mut results: Vec<SearchResult>, n: usize) -> Vec<SearchResult> {
    results.truncate(n);
    for (i, r) in results.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    results
}

/// Deterministic client over `queries.json` and `pages/<hash>.txt`.
#[derive(Debug, Default)]
pub struct FixtureClient {
    queries: HashMap<String, Vec<SearchResult>>,
    pages: HashMap<String, String>,
    search_calls: AtomicUsize,
    fetch_calls: AtomicUsize,
}

impl FixtureClient {
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, WebError> {
        let dir = dir.as_ref();
        let raw = fs::read_to_string(dir.join("queries.json"))
            .map_err(|e| WebError::BadFixtureFormat(format!("queries.json: {e}")))?;
        let queries: HashMap<String, Vec<SearchResult>> = serde_json::from_str(&raw)
            .map_err(|e| WebError::BadFixtureFormat(format!("queries.json: {e}")))?;

        let mut pages = HashMap::new();
        for result in queries.values().flatten() {
            if pages.contains_key(&result.url) {
                continue;
            }
            let path = dir.join("pages").join(fixture_page_name(&result.url));
            match fs::read_to_string(&path) {
                Ok(body) => {
                    pages.insert(result.url.clone(), body);
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => {
                    return Err(WebError::BadFixtureFormat(format!(
                        "{}: {e}",
                        path.display()
                    )))
                }
            }
        }
        Ok(Self::from_parts(queries, pages))
    }

    pub fn from_parts(
        queries: HashMap<String, Vec<SearchResult>>,
        pages: HashMap<String, String>,
    ) -> Self {
        Self {
            queries,
            pages,
            ..Self::default()
        }
    }

    pub fn search_calls(&self) -> usize {
        self.search_calls.load(Ordering::SeqCst)
    }

    pub fn fetch_calls(&self) -> usize {
        self.fetch_calls.load(Ordering::SeqCst)
    }

    fn listed_date(&self, url: &str) -> Option<DateTime<Utc>> {
        let mut dates = self
            .queries
            .values()
            .flatten()
            .filter(|r| r.url == url)
            .filter_map(|r| r.published_at);
        dates.next()
    }
}

impl SearchClient for FixtureClient {
    fn search(&self, query: &str, n: usize) -> Result<Vec<SearchResult>, WebError> {
        self.search_calls.fetch_add(1, Ordering::SeqCst);
        Ok(rerank(
            self.queries.get(query).cloned().unwrap_or_default(),
            n,
        ))
    }

    fn fetch(&self, url: &str) -> Result<FetchedPage, WebError> {
        self.fetch_calls.fetch_add(1, Ordering::SeqCst);
        match self.pages.get(url) {
            Some(text) => Ok(FetchedPage {
                text: text.clone(),
                published_at: self.listed_date(url),
            }),
            None => Err(WebError::FetchFailed {
                url: url.to_string(),
                reason: "not in fixture".into(),
            }),
        }
    }
}

/// JSON-over-HTTP search adapter.
///
/// The endpoint template may contain `{query}` and `{count}` placeholders;
/// both are percent-encoded on substitution. When neither is present they are
/// appended as `q` and `count` query parameters.
pub struct HttpSearchClient {
    endpoint: String,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct WireResult {
    url: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    snippet: String,
    #[serde(default)]
    published_at: Option<DateTime<Utc>>,
}

impl HttpSearchClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, WebError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| WebError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            client,
        })
    }

    fn search_url(&self, query: &str, n: usize) -> Result<url::Url, WebError> {
        let bad = |e: url::ParseError| WebError::Transport(format!("bad endpoint: {e}"));
        if self.endpoint.contains("{query}") || self.endpoint.contains("{count}") {
            let enc: String = url::form_urlencoded::byte_serialize(query.as_bytes()).collect();
            let filled = self
                .endpoint
                .replace("{query}", &enc)
                .replace("{count}", &n.to_string());
            url::Url::parse(&filled).map_err(bad)
        } else {
            let mut u = url::Url::parse(&self.endpoint).map_err(bad)?;
            u.query_pairs_mut()
                .append_pair("q", query)
                .append_pair("count", &n.to_string());
            Ok(u)
        }
    }

    fn get(&self, url: &str) -> Result<String, WebError> {
        let resp = self.client.get(url).send().map_err(map_reqwest)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(WebError::NonSuccessStatus(status.as_u16()));
        }
        resp.text().map_err(map_reqwest)
    }
}

fn map_reqwest(e: reqwest::Error) -> WebError {
    if e.is_timeout() {
        WebError::Timeout
    } else {
        WebError::Transport(e.to_string())
    }
}

impl SearchClient for HttpSearchClient {
    fn search(&self, query: &str, n: usize) -> Result<Vec<SearchResult>, WebError> {
        let url = self.search_url(query, n)?;
        let body = self.get(url.as_str())?;
        let wire: Vec<WireResult> =
            serde_json::from_str(&body).map_err(|e| WebError::MalformedResponse(e.to_string()))?;
        Ok(rerank(
            wire.into_iter()
                .map(|w| SearchResult {
                    url: w.url,
                    title: w.title,
                    snippet: w.snippet,
                    rank: 0,
                    published_at: w.published_at,
                })
                .collect(),
            n,
        ))
    }

    fn fetch(&self, url: &str) -> Result<FetchedPage, WebError> {
        let body = self.get(url).map_err(|e| WebError::FetchFailed {
            url: url.to_string(),
            reason: e.to_string(),
        })?;
        Ok(FetchedPage {
            text: html_to_text(&body),
            published_at: None,
        })
    }
}

const BLOCK_TAGS: &[&str] = &[
    "address",
    "article",
    "aside",
    "blockquote",
    "br",
    "dd",
    "div",
    "dl",
    "dt",
    "footer",
    "h1",
    "h2",
    "h3",
    "h4",
    "h5",
    "h6",
    "header",
    "hr",
    "li",
    "main",
    "nav",
    "ol",
    "p",
    "pre",
    "section",
    "table",
    "td",
    "th",
    "title",
    "tr",
    "ul",
];

/// Converts HTML to plain text.
///
/// Rules: `script`/`style` elements and comments are dropped; block-level
/// tags become line breaks and every other tag is removed; the five basic
/// entities, `&nbsp;` and numeric references are decoded; within each line
/// whitespace runs collapse to one space and the line is trimmed; empty lines
/// are dropped and the rest are joined with `\n`.
pub fn html_to_text(html: &str) -> String {
    let mut raw = String::with_capacity(html.len());
    let lower = html.to_ascii_lowercase();
    let mut i = 0;
    while i < html.len() {
        let rest = &html[i..];
        if rest.starts_with("<!--") {
            i += rest.find("-->").map_or(rest.len(), |p| p + 3);
            continue;
        }
        if !rest.starts_with('<') {
            let next = rest.find('<').unwrap_or(rest.len());
            raw.push_str(&rest[..next]);
            i += next;
            continue;
        }
        let Some(close) = rest.find('>') else {
            raw.push_str(rest);
            break;
        };
        let inner = rest[1..close].trim_start_matches('/');
        let name: String = inner
            .chars()
            .take_while(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        i += close + 1;
        if !rest[1..].starts_with('/') && (name == "script" || name == "style") {
            let end_tag = format!("</{name}");
            match lower[i..].find(&end_tag) {
                Some(p) => {
                    let after = i + p;
                    i = html[after..]
                        .find('>')
                        .map_or(html.len(), |q| after + q + 1);
                }
                None => i = html.len(),
            }
            continue;
        }
        if BLOCK_TAGS.contains(&name.as_str()) {
            raw.push('\n');
        }
    }
    let decoded = decode_entities(&raw);
    decoded
        .lines()
        .map(|line| line.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|line| !line.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

fn decode_entities(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        rest = &rest[amp..];
        let decoded = rest.find(';').filter(|&semi| semi <= 10).and_then(|semi| {
            let entity = &rest[1..semi];
            let c = match entity {
                "amp" => Some('&'),
                "lt" => Some('<'),
                "gt" => Some('>'),
                "quot" => Some('"'),
                "apos" | "#39" => Some('\''),
                "nbsp" => Some(' '),
                _ if entity.starts_with("#x") || entity.starts_with("#X") => {
                    u32::from_str_radix(&entity[2..], 16)
                        .ok()
                        .and_then(char::from_u32)
                }
                _ if entity.starts_with('#') => entity[1..].parse().ok().and_then(char::from_u32),
                _ => None,
            };
            c.map(|c| (c, semi))
        });
        match decoded {
            Some((c, semi)) => {
                out.push(c);
                rest = &rest[semi + 1..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Host name without a leading `www.`, used as a citation label.
pub fn source_label(url: &str) -> String {
    url::Url::parse(url)
        .ok()
        .and_then(|u| {
            u.host_str()
                .map(|h| h.trim_start_matches("www.").to_string())
        })
        .unwrap_or_else(|| url.to_string())
}
