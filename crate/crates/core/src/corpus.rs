//! Documents, tokenization and paragraph chunking.
//!
//! Documents carry their publication timestamp all the way into prompts, so
//! every chunk inherits `published_at` from its parent.

use std::io::{BufRead, Write};
use std::ops::Range;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

/// Default paragraph size in tokens.
pub const DEFAULT_CHUNK_LIMIT: usize = 250;

/// Timestamp layout used by the legacy record format and in prompts.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("document body contains no tokens")]
    EmptyDocument,
    #[error("chunk limit must be at least 1")]
    InvalidChunkLimit,
    #[error("bad timestamp {0:?}, expected YYYY-MM-DD HH:MM:SS")]
    BadTimestamp(String),
    #[error("record needs at least a timestamp and a title/summary field")]
    TooFewFields,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

/// Where a document entered the knowledge base from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Local,
    Web,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Local => "local",
            Origin::Web => "web",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub published_at: DateTime<Utc>,
    pub title: String,
    /// Stored body. Only summaries are kept, never full report text.
    pub summary: String,
    #[serde(default)]
    pub topics: Vec<String>,
    #[serde(default)]
    pub source: String,
    #[serde(default = "default_origin")]
    pub origin: Origin,
}

fn default_origin() -> Origin {
    Origin::Local
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub index_in_doc: usize,
    pub text: String,
    pub token_count: usize,
    pub published_at: DateTime<Utc>,
}

impl Chunk {
    /// Stable identifier `"{doc_id}#{index_in_doc}"`.
    pub fn id(&self) -> String {
        chunk_id(&self.doc_id, self.index_in_doc)
    }
}

pub fn chunk_id(doc_id: &str, index_in_doc: usize) -> String {
    format!("{doc_id}#{index_in_doc}")
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>, CorpusError> {
    NaiveDateTime::parse_from_str(s.trim(), TIMESTAMP_FORMAT)
        .map(|naive| naive.and_utc())
        .map_err(|_| CorpusError::BadTimestamp(s.trim().to_string()))
}

/// Han ideographs, kana and hangul syllables. Each such character is a token.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF       // hiragana, katakana
        | 0x3400..=0x4DBF     // ext A
        | 0x4E00..=0x9FFF     // unified ideographs
        | 0xAC00..=0xD7AF     // hangul syllables
        | 0xF900..=0xFAFF     // compatibility ideographs
        | 0x20000..=0x3134F   // ext B..G
    )
}

/// A token and the byte range it was read from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub span: Range<usize>,
}

/// Stateless tokenizer: lowercased letter/digit runs, one token per CJK
/// character, everything else separates.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn tokens_with_spans(&self, text: &str) -> Vec<Token> {
        let mut out = Vec::new();
        let mut run_start: Option<usize> = None;
        let flush = |start: &mut Option<usize>, end: usize, out: &mut Vec<Token>| {
            if let Some(s) = start.take() {
                out.push(Token {
                    text: text[s..end].to_lowercase(),
                    span: s..end,
                });
            }
        };
        for (i, c) in text.char_indices() {
            if is_cjk(c) {
                flush(&mut run_start, i, &mut out);
                let end = i + c.len_utf8();
                out.push(Token {
                    text: text[i..end].to_lowercase(),
                    span: i..end,
                });
            } else if c.is_alphanumeric() {
                run_start.get_or_insert(i);
            } else {
                flush(&mut run_start, i, &mut out);
            }
        }
        flush(&mut run_start, text.len(), &mut out);
        out
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        self.tokens_with_spans(text)
            .into_iter()
            .map(|t| t.text)
            .collect()
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    Tokenizer.tokenize(text)
}

/// Lowercased tokens joined by single spaces; used to compare paragraph text.
pub fn normalize_text(text: &str) -> String {
    tokenize(text).join(" ")
}

fn is_sentence_terminal(c: char) -> bool {
    matches!(c, '。' | '！' | '？' | '.' | '!' | '?')
}

/// Byte ranges of sentences: a terminal followed by whitespace or end of text
/// closes a sentence.
fn sentence_ranges(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if !is_sentence_terminal(c) {
            continue;
        }
        let end = i + c.len_utf8();
        let closes = match chars.peek() {
            None => true,
            Some(&(_, next)) => next.is_whitespace(),
        };
        if closes {
            out.push(start..end);
            start = end;
        }
    }
    if start < text.len() {
        out.push(start..text.len());
    }
    out
}

/// Extends `end` over punctuation written directly after the last token.
fn attached_punctuation_end(body: &str, end: usize) -> usize {
    let tail = &body[end..];
    let len = tail
        .char_indices()
        .find(|&(_, c)| c.is_whitespace() || c.is_alphanumeric() || is_cjk(c))
        .map_or(tail.len(), |(i, _)| i);
    end + len
}

/// Splits a document body into paragraphs of at most `chunk_limit` tokens.
///
/// Sentences are packed greedily. A sentence longer than the limit is cut at
/// token boundaries; its tail keeps packing with the sentences that follow.
/// Chunk text is the original body slice from the first to the last token,
/// plus any punctuation attached to that token, so re-tokenizing the chunks
/// in order reproduces the body's token sequence.
pub fn chunk_document(doc: &Document, chunk_limit: usize) -> Result<Vec<Chunk>, CorpusError> {
    if chunk_limit == 0 {
        return Err(CorpusError::InvalidChunkLimit);
    }
    let body = doc.summary.as_str();
    let tokens = Tokenizer.tokens_with_spans(body);
    if tokens.is_empty() {
        return Err(CorpusError::EmptyDocument);
    }

    // Token index ranges per sentence. Sentence boundaries sit on separators,
    // so every token belongs to exactly one sentence.
    let mut sentences: Vec<Range<usize>> = Vec::new();
    let mut t = 0;
    for range in sentence_ranges(body) {
        let first = t;
        while t < tokens.len() && tokens[t].span.end <= range.end {
            t += 1;
        }
        if t > first {
            sentences.push(first..t);
        }
    }
    debug_assert_eq!(t, tokens.len());

    let mut pieces: Vec<Range<usize>> = Vec::new();
    let mut current: Option<Range<usize>> = None;
    for sentence in sentences {
        let len = sentence.len();
        match current.as_mut() {
            Some(cur) if cur.len() + len <= chunk_limit => {
                cur.end = sentence.end;
                continue;
            }
            _ => {}
        }
        if let Some(cur) = current.take() {
            pieces.push(cur);
        }
        if len <= chunk_limit {
            current = Some(sentence);
            continue;
        }
        let mut start = sentence.start;
        while sentence.end - start > chunk_limit {
            pieces.push(start..start + chunk_limit);
            start += chunk_limit;
        }
        current = Some(start..sentence.end);
    }
    if let Some(cur) = current {
        pieces.push(cur);
    }

    Ok(pieces
        .into_iter()
        .enumerate()
        .map(|(index_in_doc, range)| {
            let start = tokens[range.start].span.start;
            let end = attached_punctuation_end(body, tokens[range.end - 1].span.end);
            Chunk {
                doc_id: doc.id.clone(),
                index_in_doc,
                text: body[start..end].to_string(),
                token_count: range.len(),
                published_at: doc.published_at,
            }
        })
        .collect())
}

/// 64-bit FNV-1a, used for feature hashing and for content-derived ids.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

fn legacy_id(published_at: &DateTime<Utc>, title: &str, summary: &str) -> String {
    let key = format!(
        "{}\u{1f}{title}\u{1f}{summary}",
        format_timestamp(published_at)
    );
    format!("legacy-{:016x}", fnv1a64(key.as_bytes()))
}

/// Parses one `;`-separated record: `time;title：summary;topic;topic.`
///
/// The id is derived from timestamp, title and summary, so re-importing the
/// same record yields the same id.
pub fn parse_legacy_record(line: &str) -> Result<Document, CorpusError> {
    let fields: Vec<&str> = line.split(';').collect();
    if fields.len() < 2 {
        return Err(CorpusError::TooFewFields);
    }
    let published_at = parse_timestamp(fields[0])?;

    let head = fields[1];
    let (title, summary) = match head.find(['：', ':']) {
        Some(pos) => {
            let sep_len = head[pos..].chars().next().map_or(1, char::len_utf8);
            (head[..pos].trim(), head[pos + sep_len..].trim())
        }
        // No title separator: the whole field serves as both.
        None => (head.trim(), head.trim()),
    };

    let mut topics: Vec<String> = fields[2..].iter().map(|t| t.trim().to_string()).collect();
    if let Some(last) = topics.last_mut() {
        if let Some(stripped) = last.strip_suffix('.') {
            *last = stripped.trim_end().to_string();
        }
    }
    topics.retain(|t| !t.is_empty());

    Ok(Document {
        id: legacy_id(&published_at, title, summary),
        published_at,
        title: title.to_string(),
        summary: summary.to_string(),
        topics,
        source: "legacy".to_string(),
        origin: Origin::Local,
    })
}

pub fn serialize_legacy_record(doc: &Document) -> String {
    let mut out = format!(
        "{};{}: {}",
        format_timestamp(&doc.published_at),
        doc.title,
        doc.summary
    );
    for topic in &doc.topics {
        out.push(';');
        out.push_str(topic);
    }
    out
}

/// Reads a JSONL corpus. Blank lines are skipped; errors carry 1-based line numbers.
pub fn read_jsonl_documents<R: BufRead>(reader: R) -> Result<Vec<Document>, CorpusError> {
    read_lines(reader, |line| {
        serde_json::from_str::<Document>(line).map_err(|e| e.to_string())
    })
}

pub fn read_legacy_documents<R: BufRead>(reader: R) -> Result<Vec<Document>, CorpusError> {
    read_lines(reader, |line| {
        parse_legacy_record(line).map_err(|e| e.to_string())
    })
}

pub fn write_jsonl_documents<W: Write>(mut writer: W, docs: &[Document]) -> std::io::Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut writer, doc)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub(crate) fn read_lines<R, T, F>(reader: R, mut parse: F) -> Result<Vec<T>, CorpusError>
where
    R: BufRead,
    F: FnMut(&str) -> Result<T, String>,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = parse(&line).map_err(|message| CorpusError::Parse {
            line: i + 1,
            message,
        })?;
        out.push(item);
    }
    Ok(out)
}
