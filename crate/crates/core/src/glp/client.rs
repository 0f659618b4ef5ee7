use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::GlpError;
use crate::kg::Vocab;
use crate::query::{Direction, Query};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub prompt: String,
    pub embeddings: BTreeMap<String, Vec<f32>>,
    pub max_tokens: usize,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LlmResponse {
    pub text: String,
    pub latency: Duration,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

/// `<direction>:<head>|<relation>|<tail>`. The missing side carries the
/// gold label when known, `?` otherwise, so queries sharing an entity and
/// relation stay distinct.
pub fn query_key(query: &Query, vocab: &Vocab) -> String {
    let e = vocab.entity_label(query.entity);
    let r = vocab.relation_label(query.relation);
    let g = query.gold.map_or("?", |g| vocab.entity_label(g));
    match query.direction {
        Direction::Tail => format!("tail:{e}|{r}|{g}"),
        Direction::Head => format!("head:{g}|{r}|{e}"),
    }
}

#[derive(Clone, Debug)]
pub struct HttpClient {
    pub endpoint: String,
    pub timeout: Duration,
    pub retries: u32,
    pub backoff: Duration,
    agent: ureq::Agent,
}

impl HttpClient {
    /// Three retries after the first attempt, doubling from `backoff`.
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self::with_retries(endpoint, timeout, 3, Duration::from_millis(200))
    }

    pub fn with_retries(endpoint: impl Into<String>, timeout: Duration, retries: u32, backoff: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            timeout,
            retries,
            backoff,
            agent,
        }
    }

    fn attempt(&self, req: &LlmRequest) -> Result<String, String> {
        let mut resp = self.agent.post(&self.endpoint).send_json(req).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        if status >= 400 {
            return Err(format!("HTTP {status}"));
        }
        resp.body_mut()
            .read_json::<WireResponse>()
            .map(|w| w.text)
            .map_err(|e| format!("bad response body: {e}"))
    }

    pub fn send(&self, req: &LlmRequest) -> Result<LlmResponse, GlpError> {
        let start = Instant::now();
        let mut wait = self.backoff;
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                thread::sleep(wait);
                wait *= 2;
            }
            match self.attempt(req) {
                Ok(text) => {
                    return Ok(LlmResponse {
                        text,
                        latency: start.elapsed(),
                    })
                }
                Err(e) => {
                    log::debug!("LLM request attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(GlpError::Transport {
            endpoint: self.endpoint.clone(),
            attempts: self.retries + 1,
            message: last,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MockOracle {
    Constant(String),
    /// Answers by query key.
    Table(HashMap<String, String>),
}

#[derive(Deserialize)]
struct MockLine {
    query_key: String,
    answer: String,
}

impl MockOracle {
    /// JSON lines of `{"query_key": ..., "answer": ...}`.
    pub fn load(path: &Path) -> Result<Self, GlpError> {
        let text = fs::read_to_string(path).map_err(|source| GlpError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut table = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let m: MockLine = serde_json::from_str(line).map_err(|e| GlpError::Mock(format!("{}:{}: {e}", path.display(), i + 1)))?;
            table.insert(m.query_key, m.answer);
        }
        Ok(Self::Table(table))
    }

    pub fn answer(&self, key: &str) -> Result<String, GlpError> {
        match self {
            Self::Constant(s) => Ok(s.clone()),
            Self::Table(t) => t.get(key).cloned().ok_or_else(|| GlpError::Mock(format!("no mock answer for `{key}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum LlmClient {
    Http(HttpClient),
    Mock(MockOracle),
}

impl LlmClient {
    pub fn query(&self, key: &str, req: &LlmRequest) -> Result<LlmResponse, GlpError> {
        match self {
            Self::Http(c) => c.send(req),
            Self::Mock(m) => Ok(LlmResponse {
                text: m.answer(key)?,
                latency: Duration::ZERO,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn request() -> LlmRequest {
        LlmRequest {
            prompt: "Answer:".into(),
            embeddings: BTreeMap::from([("query entity".to_string(), vec![0.5, -1.0])]),
            max_tokens: 16,
            temperature: 0.0,
        }
    }

    /// Serves `replies` in order, one connection each; returns the bodies it saw.
    fn serve(replies: Vec<(u16, &'static str)>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/generate", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut s = stream;
                write!(
                    s,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    #[test]
    fn posts_json_and_reads_text() {
        let (url, server) = serve(vec![(200, r#"{"text":"candidate3"}"#)]);
        let client = HttpClient::new(url, Duration::from_secs(5));
        let resp = client.send(&request()).unwrap();
        assert_eq!(resp.text, "candidate3");
        let body: serde_json::Value = serde_json::from_str(&server.join().unwrap()[0]).unwrap();
        assert_eq!(body["prompt"], "Answer:");
        assert_eq!(body["embeddings"]["query entity"][1], -1.0);
        assert_eq!(body["max_tokens"], 16);
    }

    #[test]
    fn retries_server_errors() {
        let (url, server) = serve(vec![(503, "{}"), (500, "{}"), (200, r#"{"text":"ok"}"#)]);
        let client = HttpClient::with_retries(url, Duration::from_secs(5), 3, Duration::from_millis(1));
        assert_eq!(client.send(&request()).unwrap().text, "ok");
        assert_eq!(server.join().unwrap().len(), 3);
    }

    #[test]
    fn unreachable_endpoint_gives_transport_error_after_retries() {
        // bind then drop to get a port nobody listens on
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let client = HttpClient::with_retries(
            format!("http://127.0.0.1:{port}/x"),
            Duration::from_millis(500),
            3,
            Duration::from_millis(1),
        );
        match client.send(&request()) {
            Err(GlpError::Transport { attempts, .. }) => assert_eq!(attempts, 4),
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn timeout_is_enforced() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/slow", listener.local_addr().unwrap());
        let accepted = Arc::new(AtomicUsize::new(0));
        let seen = accepted.clone();
        thread::spawn(move || {
            let mut held = Vec::new();
            for s in listener.incoming().take(2) {
                seen.fetch_add(1, Ordering::SeqCst);
                held.push(s);
            }
            thread::sleep(Duration::from_secs(3));
        });
        let client = HttpClient::with_retries(url, Duration::from_millis(200), 1, Duration::from_millis(1));
        let start = Instant::now();
        assert!(matches!(client.send(&request()), Err(GlpError::Transport { .. })));
        assert!(start.elapsed() < Duration::from_secs(2));
        assert_eq!(accepted.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn mock_modes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("oracle.jsonl");
        fs::write(&p, "{\"query_key\":\"tail:a|r|?\",\"answer\":\"b\"}\n\n").unwrap();
        let table = MockOracle::load(&p).unwrap();
        assert_eq!(table.answer("tail:a|r|?").unwrap(), "b");
        assert!(table.answer("head:?|r|a").is_err());
        let constant = LlmClient::Mock(MockOracle::Constant("candidate1".into()));
        assert_eq!(constant.query("anything", &request()).unwrap().text, "candidate1");
        fs::write(&p, "not json\n").unwrap();
        assert!(MockOracle::load(&p).unwrap_err().to_string().contains("oracle.jsonl:1"));
    }

    #[test]
    fn keys_mark_the_missing_side() {
        let mut vocab = Vocab::new();
        let a = vocab.intern_entity("a");
        let r = vocab.intern_relation("born in");
        assert_eq!(query_key(&Query::tail(a, r, None), &vocab), "tail:a|born in|?");
        assert_eq!(query_key(&Query::head(a, r, None), &vocab), "head:?|born in|a");
        let b = vocab.intern_entity("b");
        assert_eq!(query_key(&Query::tail(a, r, Some(b)), &vocab), "tail:a|born in|b");
        assert_eq!(query_key(&Query::head(a, r, Some(b)), &vocab), "head:b|born in|a");
    }
}
