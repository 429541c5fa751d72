use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{check_logq, AdapterError, AdapterRequest, AdapterResponse, Envelope, ProposeResponse};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    /// Extra attempts after a timeout.
    pub retries: u32,
    pub max_inflight: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            endpoint: super::DEFAULT_ENDPOINT.to_owned(),
            timeout_ms: 30_000,
            retries: 1,
            max_inflight: 4,
        }
    }
}

impl ClientConfig {
    /// Applies `EBMH_ADAPTER_URL` when set.
    pub fn with_env_override(mut self) -> Self {
        if let Ok(url) = std::env::var(super::ENDPOINT_ENV) {
            if !url.trim().is_empty() {
                self.endpoint = url;
            }
        }
        self
    }
}

/// Blocking JSON-over-HTTP client. Safe to share between threads; at most
/// `max_inflight` requests run at once.
pub struct AdapterClient {
    config: ClientConfig,
    agent: ureq::Agent,
    next_id: AtomicU64,
    inflight: Mutex<usize>,
    slot_freed: Condvar,
}

impl std::fmt::Debug for AdapterClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdapterClient").field("config", &self.config).finish()
    }
}

struct Slot<'a>(&'a AdapterClient);

impl Drop for Slot<'_> {
    fn drop(&mut self) {
        let mut n = self.0.inflight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.slot_freed.notify_one();
    }
}

impl AdapterClient {
    pub fn new(config: ClientConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        AdapterClient {
            config,
            agent,
            next_id: AtomicU64::new(1),
            inflight: Mutex::new(0),
            slot_freed: Condvar::new(),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.config.endpoint
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn acquire(&self) -> Slot<'_> {
        let limit = self.config.max_inflight.max(1);
        let mut n = self.inflight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= limit {
            n = self.slot_freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Slot(self)
    }

    /// Sends one request and validates the response against the schema of
    /// its op. Timeouts are retried up to `retries` times.
    pub fn call(&self, request: AdapterRequest) -> Result<AdapterResponse, AdapterError> {
        let _slot = self.acquire();
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let envelope = Envelope { id, request };
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.post(&envelope) {
                Err(AdapterError::Timeout { .. }) if attempts <= self.config.retries => continue,
                Err(AdapterError::Timeout { .. }) => return Err(AdapterError::Timeout { attempts }),
                Err(e) => return Err(e),
                Ok((status, body)) => return validate(&envelope, status, &body),
            }
        }
    }

    fn post(&self, envelope: &Envelope) -> Result<(u16, String), AdapterError> {
        let transport = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => AdapterError::Timeout { attempts: 1 },
            other => AdapterError::Transport(other.to_string()),
        };
        let resp = self
            .agent
            .post(&self.config.endpoint)
            .send_json(envelope)
            .map_err(transport)?;
        let status = resp.status().as_u16();
        let body = resp.into_body().read_to_string().map_err(transport)?;
        Ok((status, body))
    }

    pub fn propose(&self, text: &str, params: Value) -> Result<ProposeResponse, AdapterError> {
        match self.call(AdapterRequest::Propose {
            text: text.to_owned(),
            params,
        })? {
            AdapterResponse::Propose(p) => Ok(p),
            _ => unreachable!("validated against the propose schema"),
        }
    }

    pub fn energy(&self, text: &str, term: &str, reference: Option<&str>) -> Result<f64, AdapterError> {
        match self.call(AdapterRequest::Energy {
            text: text.to_owned(),
            term: term.to_owned(),
            reference: reference.map(str::to_owned),
        })? {
            AdapterResponse::Energy { energy } => Ok(energy),
            _ => unreachable!("validated against the energy schema"),
        }
    }

    pub fn score(&self, src: &str, tgt: &str) -> Result<f64, AdapterError> {
        match self.call(AdapterRequest::Score {
            src: src.to_owned(),
            tgt: tgt.to_owned(),
        })? {
            AdapterResponse::Score { logq } => Ok(logq),
            _ => unreachable!("validated against the score schema"),
        }
    }
}

fn parse_body(body: &str) -> Result<Value, AdapterError> {
    serde_json::from_str(body).map_err(|e| {
        let msg = e.to_string();
        if msg.contains("out of range") || ["NaN", "Infinity"].iter().any(|t| body.contains(t)) {
            AdapterError::NonFinite(msg)
        } else {
            AdapterError::Schema(format!("malformed JSON: {msg}"))
        }
    })
}

fn number(obj: &Value, field: &str) -> Result<f64, AdapterError> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(AdapterError::Schema(format!("missing field `{field}`"))),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| AdapterError::Schema(format!("field `{field}` is not a number"))),
    }
}

fn validate(envelope: &Envelope, status: u16, body: &str) -> Result<AdapterResponse, AdapterError> {
    if status != 200 {
        let message = serde_json::from_str::<Value>(body)
            .ok()
            .and_then(|v| v.get("error").and_then(Value::as_str).map(str::to_owned))
            .unwrap_or_else(|| body.chars().take(200).collect());
        return Err(AdapterError::Status { status, message });
    }
    let v = parse_body(body)?;
    if !v.is_object() {
        return Err(AdapterError::Schema("response is not a JSON object".into()));
    }
    match v.get("id").and_then(Value::as_u64) {
        Some(id) if id == envelope.id => {}
        Some(id) => {
            return Err(AdapterError::Schema(format!(
                "response id {id} does not match request id {}",
                envelope.id
            )))
        }
        None => return Err(AdapterError::Schema("missing field `id`".into())),
    }
    match &envelope.request {
        AdapterRequest::Propose { .. } => {
            let text = v
                .get("text")
                .and_then(Value::as_str)
                .ok_or_else(|| AdapterError::Schema("missing field `text`".into()))?
                .to_owned();
            Ok(AdapterResponse::Propose(ProposeResponse {
                text,
                logq_forward: check_logq("logq_forward", number(&v, "logq_forward")?)?,
                logq_reverse: check_logq("logq_reverse", number(&v, "logq_reverse")?)?,
                logq_identity: check_logq("logq_identity", number(&v, "logq_identity")?)?,
            }))
        }
        AdapterRequest::Energy { .. } => {
            let energy = number(&v, "energy")?;
            if !energy.is_finite() {
                return Err(AdapterError::NonFinite(format!("energy = {energy}")));
            }
            Ok(AdapterResponse::Energy { energy })
        }
        AdapterRequest::Score { .. } => Ok(AdapterResponse::Score {
            logq: check_logq("logq", number(&v, "logq")?)?,
        }),
    }
}
