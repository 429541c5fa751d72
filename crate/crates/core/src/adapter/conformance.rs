//! Protocol conformance checks for adapter servers.

use std::fmt;

use serde::Serialize;
use serde_json::json;

use super::{AdapterClient, AdapterError};

#[derive(Clone, Debug)]
pub struct ConformanceOptions {
    pub sample_text: String,
    /// Energy term queried by the energy check.
    pub energy_term: String,
    /// Word count of the long-input probe.
    pub long_input_words: usize,
    /// Tolerance when comparing a proposal's forward score to a rescoring.
    pub score_tolerance: f64,
}

impl Default for ConformanceOptions {
    fn default() -> Self {
        ConformanceOptions {
            sample_text: "how are you doing today".into(),
            energy_term: "disc".into(),
            long_input_words: 1000,
            score_tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ConformanceReport {
    pub endpoint: String,
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{mark} {:<18} {}", c.name, c.detail)?;
        }
        Ok(())
    }
}

fn outcome(name: &'static str, r: Result<String, String>) -> CheckResult {
    match r {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

/// Runs every check against `client`'s endpoint.
pub fn conformance_suite(client: &AdapterClient, opts: &ConformanceOptions) -> ConformanceReport {
    let text = opts.sample_text.as_str();
    let mut checks = Vec::new();

    let proposal = client.propose(text, json!({"seed": 0}));
    checks.push(outcome(
        "propose",
        proposal
            .as_ref()
            .map(|p| format!("candidate {:?}, logq_forward {}", p.text, p.logq_forward))
            .map_err(|e| e.to_string()),
    ));

    checks.push(outcome(
        "propose-identity",
        match &proposal {
            Err(e) => Err(e.to_string()),
            Ok(p) if p.text.split_whitespace().eq(text.split_whitespace()) => {
                if (p.logq_identity - p.logq_forward).abs() <= opts.score_tolerance {
                    Ok("identity candidate with consistent logq_identity".into())
                } else {
                    Err(format!(
                        "identity candidate but logq_identity {} != logq_forward {}",
                        p.logq_identity, p.logq_forward
                    ))
                }
            }
            Ok(p) => Ok(format!("logq_identity {}", p.logq_identity)),
        },
    ));

    checks.push(outcome(
        "score-consistency",
        match &proposal {
            Err(e) => Err(e.to_string()),
            Ok(p) => client
                .score(text, &p.text)
                .map_err(|e| e.to_string())
                .and_then(|s| {
                    if (s - p.logq_forward).abs() <= opts.score_tolerance {
                        Ok(format!("score {s} matches logq_forward"))
                    } else {
                        Err(format!("score {s} vs logq_forward {}", p.logq_forward))
                    }
                }),
        },
    ));

    checks.push(outcome(
        "score",
        client
            .score(text, text)
            .map(|s| format!("self-score {s}"))
            .map_err(|e| e.to_string()),
    ));

    checks.push(outcome(
        "energy",
        client
            .energy(text, &opts.energy_term, None)
            .map(|e| format!("{} = {e}", opts.energy_term))
            .map_err(|e| e.to_string()),
    ));

    let long = vec!["word"; opts.long_input_words].join(" ");
    checks.push(outcome(
        "long-input",
        match client.propose(&long, json!({"seed": 0})) {
            Ok(_) => Ok(format!("{}-word input handled", opts.long_input_words)),
            Err(e @ AdapterError::Status { .. }) => Ok(format!("cleanly rejected: {e}")),
            Err(e) => Err(e.to_string()),
        },
    ));

    ConformanceReport {
        endpoint: client.endpoint().to_owned(),
        checks,
    }
}
