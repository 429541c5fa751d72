//! Wire protocol for external proposal and energy services.
//!
//! One endpoint, `POST /v1/adapter`, takes a JSON object dispatched on `op`:
//!
//! | op        | request fields             | response fields                                       |
//! |-----------|----------------------------|-------------------------------------------------------|
//! | `propose` | `text`, `params`           | `text`, `logq_forward`, `logq_reverse`, `logq_identity` |
//! | `energy`  | `text`, `term`, `ref`?     | `energy`                                              |
//! | `score`   | `src`, `tgt`               | `logq`                                                |
//!
//! Every request carries an integer `id` that the response must echo. All
//! log-probabilities must be finite and ≤ 0. Errors come back as a non-200
//! status with body `{"id": ..., "error": "..."}`.

mod client;
pub mod conformance;
pub mod mock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{AdapterClient, ClientConfig};

pub const DEFAULT_ENDPOINT: &str = "http://127.0.0.1:8750/v1/adapter";
pub const ENDPOINT_ENV: &str = "EBMH_ADAPTER_URL";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum AdapterRequest {
    Propose {
        text: String,
        #[serde(default)]
        params: serde_json::Value,
    },
    Energy {
        text: String,
        term: String,
        #[serde(rename = "ref", default, skip_serializing_if = "Option::is_none")]
        reference: Option<String>,
    },
    Score {
        src: String,
        tgt: String,
    },
}

/// A request with its correlation id, as sent on the wire.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub id: u64,
    #[serde(flatten)]
    pub request: AdapterRequest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposeResponse {
    pub text: String,
    pub logq_forward: f64,
    pub logq_reverse: f64,
    pub logq_identity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AdapterResponse {
    Propose(ProposeResponse),
    Energy { energy: f64 },
    Score { logq: f64 },
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("adapter timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },

    #[error("adapter transport failure: {0}")]
    Transport(String),

    #[error("adapter returned HTTP {status}: {message}")]
    Status { status: u16, message: String },

    #[error("adapter schema violation: {0}")]
    Schema(String),

    #[error("adapter sent a non-finite number: {0}")]
    NonFinite(String),
}

impl AdapterError {
    /// True when the server answered with a well-formed error response.
    pub fn is_clean_rejection(&self) -> bool {
        matches!(self, AdapterError::Status { .. })
    }
}

/// Checks one log-probability field from a response.
pub(crate) fn check_logq(name: &str, v: f64) -> Result<f64, AdapterError> {
    if !v.is_finite() {
        return Err(AdapterError::NonFinite(format!("{name} = {v}")));
    }
    if v > 0.0 {
        return Err(AdapterError::Schema(format!("invalid log-probability {name} = {v}")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn request_wire_shape() {
        let env = Envelope {
            id: 7,
            request: AdapterRequest::Propose {
                text: "how are you".into(),
                params: json!({"seed": 1}),
            },
        };
        let v = serde_json::to_value(&env).unwrap();
        assert_eq!(v, json!({"id": 7, "op": "propose", "text": "how are you", "params": {"seed": 1}}));
        let env = Envelope {
            id: 1,
            request: AdapterRequest::Energy {
                text: "x".into(),
                term: "disc".into(),
                reference: None,
            },
        };
        assert_eq!(
            serde_json::to_value(&env).unwrap(),
            json!({"id": 1, "op": "energy", "text": "x", "term": "disc"})
        );
        let back: Envelope = serde_json::from_value(json!({"id": 2, "op": "score", "src": "a", "tgt": "b"})).unwrap();
        assert_eq!(back.request, AdapterRequest::Score { src: "a".into(), tgt: "b".into() });
    }

    #[test]
    fn logq_checks() {
        assert!(check_logq("x", -1.0).is_ok());
        assert!(check_logq("x", 0.0).is_ok());
        assert!(matches!(check_logq("x", 0.1), Err(AdapterError::Schema(_))));
        assert!(matches!(check_logq("x", f64::NAN), Err(AdapterError::NonFinite(_))));
    }
}
