//! Blocking client for a text-completion endpoint. Completions are held to
//! the plan grammar; rejected ones are retried.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{parse_plan, Plan, PlanError, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// `http://host:port/path`; POSTed `{"prompt", "max_tokens"}`.
    pub endpoint: String,
    pub timeout_s: f64,
    /// Extra attempts after a grammar rejection.
    pub retries: u32,
    pub max_tokens: u32,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/completion".into(),
            timeout_s: 30.0,
            retries: 2,
            max_tokens: 512,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("request to {endpoint} failed: {message}")]
    Network { endpoint: String, message: String },
    #[error("no response from {endpoint} within {timeout_s} s")]
    Timeout { endpoint: String, timeout_s: f64 },
    #[error("completion rejected after {attempts} attempts: {last}")]
    Rejected { attempts: u32, last: PlanError },
}

/// Strips surrounding whitespace and parses the completion as a plan.
pub fn plan_from_completion(text: &str, vocab: &Vocabulary) -> Result<Plan, PlanError> {
    parse_plan(text.trim(), vocab)
}

pub fn llm_request(config: &LlmConfig, prompt: &str, vocab: &Vocabulary) -> Result<Plan, LlmError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(config.timeout_s)))
        .build()
        .into();
    let body = serde_json::json!({ "prompt": prompt, "max_tokens": config.max_tokens }).to_string();
    let attempts = config.retries + 1;
    let mut last = None;
    for attempt in 1..=attempts {
        let text = agent
            .post(&config.endpoint)
            .header("content-type", "application/json")
            .send(body.as_str())
            .and_then(|mut r| r.body_mut().read_to_string())
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => LlmError::Timeout {
                    endpoint: config.endpoint.clone(),
                    timeout_s: config.timeout_s,
                },
                other => LlmError::Network {
                    endpoint: config.endpoint.clone(),
                    message: other.to_string(),
                },
            })?;
        match plan_from_completion(&text, vocab) {
            Ok(plan) => return Ok(plan),
            Err(e) => {
                log::warn!("completion {attempt}/{attempts} rejected: {e}");
                last = Some(e);
            }
        }
    }
    Err(LlmError::Rejected {
        attempts,
        last: last.expect("at least one attempt"),
    })
}
