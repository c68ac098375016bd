mod common;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use finrag_core::gate::ingest_document;
use finrag_core::websearch::{fixture_page_name, SearchResult};
use finrag_core::{
    Gate, GenerationBackend, GenerationError, GenerationRequest, HttpBackend, HttpSearchClient,
    SearchClient, VectorIndex, WebError,
};
use parking_lot::RwLock;

use common::*;

struct Request {
    method: String,
    target: String,
    body: String,
}

struct Reply {
    status: u16,
    content_type: &'static str,
    body: String,
    delay: Duration,
}

impl Reply {
    fn json(status: u16, body: impl Into<String>) -> Self {
        Self {
            status,
            content_type: "application/json",
            body: body.into(),
            delay: Duration::ZERO,
        }
    }

    fn html(body: impl Into<String>) -> Self {
        Self {
            status: 200,
            content_type: "text/html; charset=utf-8",
            body: body.into(),
            delay: Duration::ZERO,
        }
    }
}

/// One-request-per-connection HTTP/1.1 server on an ephemeral port.
struct StubServer {
    base: String,
    hits: Arc<AtomicUsize>,
}

impl StubServer {
    fn start<F>(handler: F) -> Self
    where
        F: Fn(&Request, &str) -> Reply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let handler = Arc::new(handler);
        let (b, h) = (base.clone(), hits.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                h.fetch_add(1, Ordering::SeqCst);
                let (handler, b) = (handler.clone(), b.clone());
                thread::spawn(move || serve(stream, handler.as_ref(), &b));
            }
        });
        Self { base, hits }
    }

    fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn serve(stream: TcpStream, handler: &(dyn Fn(&Request, &str) -> Reply + Send + Sync), base: &str) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).is_err() {
        return;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let target = parts.next().unwrap_or_default().to_string();
    let mut content_length = 0;
    loop {
        let mut header = String::new();
        if reader.read_line(&mut header).unwrap_or(0) == 0 || header == "\r\n" {
            break;
        }
        if let Some((name, value)) = header.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; content_length];
    reader.read_exact(&mut body).unwrap();
    let request = Request {
        method,
        target,
        body: String::from_utf8(body).unwrap(),
    };
    let reply = handler(&request, base);
    thread::sleep(reply.delay);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {} X\r\nContent-Type: {}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        reply.status,
        reply.content_type,
        reply.body.len(),
        reply.body
    );
}

fn query_params(target: &str) -> HashMap<String, String> {
    let url = url::Url::parse(&format!("http://x{target}")).unwrap();
    url.query_pairs().into_owned().collect()
}

const TIMEOUT: Duration = Duration::from_secs(5);

#[test]
fn search_maps_results_and_ranks() {
    let server = StubServer::start(|req, _| {
        let params = query_params(&req.target);
        assert_eq!(params["q"], "bank rates");
        assert_eq!(params["count"], "5");
        Reply::json(
            200,
            r#"[{"url":"https://a.example/1","title":"A","snippet":"first"},
                {"url":"https://b.example/2","title":"B","snippet":"second","published_at":"2023-05-01T00:00:00Z"}]"#,
        )
    });
    let client = HttpSearchClient::new(format!("{}/search", server.base), TIMEOUT).unwrap();
    let results = client.search("bank rates", 5).unwrap();
    assert_eq!(results.len(), 2);
    assert_eq!(results.iter().map(|r| r.rank).collect::<Vec<_>>(), [1, 2]);
    assert_eq!(results[1].title, "B");
    assert!(results[1].published_at.is_some());
}

#[test]
fn search_endpoint_template() {
    let server = StubServer::start(|req, _| {
        assert!(req.target.starts_with("/s/10/"), "{}", req.target);
        Reply::json(200, "[]")
    });
    let client =
        HttpSearchClient::new(format!("{}/s/{{count}}/{{query}}", server.base), TIMEOUT).unwrap();
    assert!(client.search("a b", 10).unwrap().is_empty());
}

#[test]
fn search_error_statuses() {
    let server = StubServer::start(|req, _| match req.target.as_str() {
        t if t.starts_with("/fail") => Reply::json(500, "oops"),
        _ => Reply::json(200, "{not json"),
    });
    let failing = HttpSearchClient::new(format!("{}/fail", server.base), TIMEOUT).unwrap();
    assert_eq!(failing.search("q", 3), Err(WebError::NonSuccessStatus(500)));
    let garbled = HttpSearchClient::new(format!("{}/garbled", server.base), TIMEOUT).unwrap();
    assert!(matches!(
        garbled.search("q", 3),
        Err(WebError::MalformedResponse(_))
    ));
}

#[test]
fn search_timeout() {
    let server = StubServer::start(|_, _| Reply {
        delay: Duration::from_millis(800),
        ..Reply::json(200, "[]")
    });
    let client =
        HttpSearchClient::new(format!("{}/slow", server.base), Duration::from_millis(200)).unwrap();
    assert_eq!(client.search("q", 1), Err(WebError::Timeout));
}

#[test]
fn fetch_strips_html() {
    let server = StubServer::start(|req, _| match req.target.as_str() {
        "/page" => Reply::html(
            "<html><head><style>p{}</style></head><body><p>a  b</p><p>c</p></body></html>",
        ),
        _ => Reply::json(404, ""),
    });
    let client = HttpSearchClient::new(format!("{}/search", server.base), TIMEOUT).unwrap();
    assert_eq!(
        client.fetch(&format!("{}/page", server.base)).unwrap().text,
        "a b\nc"
    );
    assert!(matches!(
        client.fetch(&format!("{}/missing", server.base)),
        Err(WebError::FetchFailed { .. })
    ));
}

/// Serves the web fixture over HTTP, rewriting result urls to this server.
fn fixture_over_http() -> StubServer {
    let dir = fixtures_dir().join("web");
    let queries: HashMap<String, Vec<SearchResult>> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("queries.json")).unwrap()).unwrap();
    StubServer::start(move |req, base| {
        if let Some(name) = req.target.strip_prefix("/pages/") {
            return match std::fs::read_to_string(dir.join("pages").join(name)) {
                Ok(body) => Reply::html(
                    body.lines()
                        .map(|l| format!("<p>{l}</p>"))
                        .collect::<String>(),
                ),
                Err(_) => Reply::json(404, ""),
            };
        }
        let params = query_params(&req.target);
        let n: usize = params["count"].parse().unwrap();
        let results: Vec<serde_json::Value> = queries
            .get(&params["q"])
            .into_iter()
            .flatten()
            .take(n)
            .map(|r| {
                serde_json::json!({
                    "url": format!("{base}/pages/{}", fixture_page_name(&r.url)),
                    "title": r.title,
                    "snippet": r.snippet,
                    "published_at": r.published_at,
                })
            })
            .collect();
        Reply::json(200, serde_json::to_string(&results).unwrap())
    })
}

#[test]
fn gate_behaves_the_same_over_http() {
    let server = fixture_over_http();
    let client = HttpSearchClient::new(format!("{}/search", server.base), TIMEOUT).unwrap();
    let enc = fixture_encoder();
    let kb = RwLock::new(VectorIndex::new(enc.dim()));
    for doc in fixture_documents() {
        ingest_document(&enc, &kb, &doc, 250).unwrap();
    }
    let gate = Gate::new(&enc, &kb, &client).with_clock(fixed_now);
    let cfg = fixture_gate_config();

    let (_, local) = gate.retrieve(LOCAL_QUESTION, &cfg).unwrap();
    assert_eq!(local.web_calls, 0);
    assert_eq!(server.hits(), 0);

    let (results, first) = gate.retrieve(WEB_QUESTION, &cfg).unwrap();
    assert_eq!(first.web_calls, 1);
    assert!(first.kb_documents_added >= 1);
    assert!(results[0]
        .source_url
        .as_deref()
        .unwrap()
        .starts_with(&server.base));
    let hits = server.hits();
    let (_, second) = gate.retrieve(WEB_QUESTION, &cfg).unwrap();
    assert_eq!(second.web_calls, 0);
    assert_eq!(server.hits(), hits);
}

#[test]
fn backend_posts_request_and_reads_text() {
    let server = StubServer::start(|req, _| {
        assert_eq!(req.method, "POST");
        let r: GenerationRequest = serde_json::from_str(&req.body).unwrap();
        Reply::json(200, format!(r#"{{"text":"len={}"}}"#, r.prompt.len()))
    });
    let backend = HttpBackend::new(format!("{}/generate", server.base), TIMEOUT).unwrap();
    assert_eq!(
        backend.generate(&GenerationRequest::new("hello")).unwrap(),
        "len=5"
    );
}

#[test]
fn backend_error_paths() {
    let server = StubServer::start(|req, _| match req.target.as_str() {
        "/missing" => Reply::json(404, "no"),
        _ => Reply::json(200, r#"{"answer":"wrong field"}"#),
    });
    let missing = HttpBackend::new(format!("{}/missing", server.base), TIMEOUT).unwrap();
    assert_eq!(
        missing.generate(&GenerationRequest::new("p")),
        Err(GenerationError::NonSuccessStatus(404))
    );
    let malformed = HttpBackend::new(format!("{}/bad", server.base), TIMEOUT).unwrap();
    assert!(matches!(
        malformed.generate(&GenerationRequest::new("p")),
        Err(GenerationError::MalformedResponse(_))
    ));
}

#[test]
fn backend_retries_once_on_timeout() {
    let server = StubServer::start(|_, _| Reply {
        delay: Duration::from_millis(600),
        ..Reply::json(200, r#"{"text":"late"}"#)
    });
    let backend =
        HttpBackend::new(format!("{}/slow", server.base), Duration::from_millis(150)).unwrap();
    assert_eq!(
        backend.generate(&GenerationRequest::new("p")),
        Err(GenerationError::Timeout)
    );
    assert_eq!(server.hits(), 2);
}
