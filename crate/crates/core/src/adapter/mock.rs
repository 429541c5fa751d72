//! A scripted in-process adapter server for tests and demos.
//!
//! The mock speaks the full protocol without any model behind it. Its
//! proposal log-probabilities come from a toy scoring rule, `score(src, tgt)
//! = -(0.25 + |words(src) Δ words(tgt)|)`, and `propose` reports exactly those
//! values, so forward scores agree with a later `score` call.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};

type EnergyFn = dyn Fn(&str, &str, Option<&str>) -> f64 + Send + Sync;
type RawFn = dyn Fn(&Value) -> (u16, String) + Send + Sync;

/// Behaviour of a [`MockServer`].
#[derive(Clone)]
pub struct MockAdapter {
    /// Candidate texts returned by `propose`, cycled. Empty means echo.
    pub script: Vec<String>,
    /// Energy for `(text, term, ref)`.
    pub energy: Arc<EnergyFn>,
    /// Omit `logq_identity` from propose responses.
    pub drop_identity: bool,
    /// Replace `logq_forward` with this value.
    pub forced_forward: Option<f64>,
    /// Inputs with more words than this are rejected with HTTP 413.
    pub max_words: Option<usize>,
    /// Sleep this long before answering the first `n` requests.
    pub stall: Option<(usize, Duration)>,
    /// Full override of the response.
    pub raw: Option<Arc<RawFn>>,
}

impl Default for MockAdapter {
    fn default() -> Self {
        MockAdapter {
            script: Vec::new(),
            energy: Arc::new(|_, _, _| 0.0),
            drop_identity: false,
            forced_forward: None,
            max_words: Some(4096),
            stall: None,
            raw: None,
        }
    }
}

/// The mock's proposal log-probability.
pub fn mock_score(src: &str, tgt: &str) -> f64 {
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for w in src.split_whitespace() {
        *counts.entry(w).or_default() += 1;
    }
    for w in tgt.split_whitespace() {
        *counts.entry(w).or_default() -= 1;
    }
    -(0.25 + counts.values().map(|c| c.unsigned_abs()).sum::<u64>() as f64)
}

impl MockAdapter {
    pub fn echo() -> Self {
        Self::default()
    }

    pub fn scripted<I: IntoIterator<Item = S>, S: Into<String>>(texts: I) -> Self {
        MockAdapter {
            script: texts.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    pub fn with_energy(mut self, f: impl Fn(&str, &str, Option<&str>) -> f64 + Send + Sync + 'static) -> Self {
        self.energy = Arc::new(f);
        self
    }

    pub fn with_raw(mut self, f: impl Fn(&Value) -> (u16, String) + Send + Sync + 'static) -> Self {
        self.raw = Some(Arc::new(f));
        self
    }

    fn handle(&self, req: &Value, counter: &AtomicUsize) -> (u16, String) {
        if let Some(raw) = &self.raw {
            return raw(req);
        }
        let id = req.get("id").cloned().unwrap_or(Value::Null);
        let err = |status: u16, msg: &str| (status, json!({"id": id, "error": msg}).to_string());
        let text_field = |k: &str| req.get(k).and_then(Value::as_str);
        let too_long = |t: &str| self.max_words.is_some_and(|m| t.split_whitespace().count() > m);
        match req.get("op").and_then(Value::as_str) {
            Some("propose") => {
                let Some(text) = text_field("text") else {
                    return err(400, "missing text");
                };
                if too_long(text) {
                    return err(413, "input too long");
                }
                let cand = if self.script.is_empty() {
                    text.to_owned()
                } else {
                    let i = counter.fetch_add(1, Ordering::Relaxed);
                    self.script[i % self.script.len()].clone()
                };
                let mut body = json!({
                    "id": id,
                    "text": cand,
                    "logq_forward": self.forced_forward.unwrap_or_else(|| mock_score(text, &cand)),
                    "logq_reverse": mock_score(&cand, text),
                    "logq_identity": mock_score(text, text),
                });
                if self.drop_identity {
                    body.as_object_mut().unwrap().remove("logq_identity");
                }
                (200, body.to_string())
            }
            Some("energy") => {
                let (Some(text), Some(term)) = (text_field("text"), text_field("term")) else {
                    return err(400, "missing text or term");
                };
                if too_long(text) {
                    return err(413, "input too long");
                }
                let e = (self.energy)(text, term, text_field("ref"));
                (200, json!({"id": id, "energy": e}).to_string())
            }
            Some("score") => {
                let (Some(src), Some(tgt)) = (text_field("src"), text_field("tgt")) else {
                    return err(400, "missing src or tgt");
                };
                if too_long(src) || too_long(tgt) {
                    return err(413, "input too long");
                }
                (200, json!({"id": id, "logq": mock_score(src, tgt)}).to_string())
            }
            _ => err(400, "unknown op"),
        }
    }
}

/// A running mock server bound to an ephemeral localhost port. Stops on drop.
pub struct MockServer {
    server: Arc<tiny_http::Server>,
    worker: Option<JoinHandle<()>>,
    port: u16,
    hits: Arc<AtomicUsize>,
}

impl MockServer {
    pub fn start(behavior: MockAdapter) -> std::io::Result<Self> {
        let server = tiny_http::Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| std::io::Error::other("mock server has no IP address"))?;
        let server = Arc::new(server);
        let hits = Arc::new(AtomicUsize::new(0));
        let worker = {
            let server = Arc::clone(&server);
            let hits = Arc::clone(&hits);
            let behavior = Arc::new(behavior);
            let script_pos = Arc::new(AtomicUsize::new(0));
            std::thread::spawn(move || {
                for mut request in server.incoming_requests() {
                    let n = hits.fetch_add(1, Ordering::SeqCst);
                    let behavior = Arc::clone(&behavior);
                    let script_pos = Arc::clone(&script_pos);
                    std::thread::spawn(move || {
                        if let Some((count, delay)) = behavior.stall {
                            if n < count {
                                std::thread::sleep(delay);
                            }
                        }
                        let (status, body) = match (request.method(), request.url()) {
                            (tiny_http::Method::Get, "/v1/info") => {
                                (200, json!({"max_inflight": 16, "model": "mock"}).to_string())
                            }
                            (tiny_http::Method::Post, "/v1/adapter") => {
                                let mut raw = String::new();
                                let _ = request.as_reader().read_to_string(&mut raw);
                                match serde_json::from_str::<Value>(&raw) {
                                    Ok(v) => behavior.handle(&v, &script_pos),
                                    Err(e) => (400, json!({"error": e.to_string()}).to_string()),
                                }
                            }
                            _ => (404, json!({"error": "not found"}).to_string()),
                        };
                        let header = tiny_http::Header::from_bytes("Content-Type", "application/json")
                            .expect("static header");
                        let resp = tiny_http::Response::from_string(body)
                            .with_status_code(status)
                            .with_header(header);
                        let _ = request.respond(resp);
                    });
                }
            })
        };
        Ok(MockServer {
            server,
            worker: Some(worker),
            port,
            hits,
        })
    }

    /// Full adapter endpoint URL.
    pub fn endpoint(&self) -> String {
        format!("http://127.0.0.1:{}/v1/adapter", self.port)
    }

    /// Number of HTTP requests received so far.
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_rule() {
        assert_eq!(mock_score("a b", "a b"), -0.25);
        assert_eq!(mock_score("a b", "a c"), -2.25);
        assert_eq!(mock_score("a", ""), -1.25);
    }
}
