//! Chat-completions client for OpenAI-compatible endpoints, configured from the
//! environment:
//!
//! - `PHQ_LLM_CLIENTS`: comma-separated client names
//! - `PHQ_LLM_<NAME>_ENDPOINT`: full chat-completions URL
//! - `PHQ_LLM_<NAME>_MODEL`: model identifier sent in the request
//! - `PHQ_LLM_<NAME>_API_KEY`: bearer token (optional for local servers)
//! - `PHQ_LLM_<NAME>_CONCURRENCY`: parallel requests allowed (default 1)

use std::time::Duration;

use phq_core::llm::{LlmClient, LlmError};
use serde_json::{json, Value};

pub struct LiveClient {
    name: String,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    concurrency: usize,
    agent: ureq::Agent,
}

const TIMEOUT: Duration = Duration::from_secs(120);

fn var(name: &str, key: &str) -> Option<String> {
    std::env::var(format!("PHQ_LLM_{}_{key}", name.to_ascii_uppercase())).ok().filter(|v| !v.is_empty())
}

impl LiveClient {
    pub fn from_env(name: &str) -> Result<Self, LlmError> {
        let need = |key: &str| var(name, key).ok_or_else(|| LlmError::Config(format!("PHQ_LLM_{}_{key} is not set", name.to_ascii_uppercase())));
        let agent = ureq::Agent::config_builder().timeout_global(Some(TIMEOUT)).http_status_as_error(false).build().new_agent();
        Ok(Self {
            name: name.to_string(),
            endpoint: need("ENDPOINT")?,
            model: need("MODEL")?,
            api_key: var(name, "API_KEY"),
            concurrency: var(name, "CONCURRENCY").and_then(|v| v.parse().ok()).unwrap_or(1).max(1),
            agent,
        })
    }

    /// Every client listed in `PHQ_LLM_CLIENTS`.
    pub fn all_from_env() -> Result<Vec<Self>, LlmError> {
        let names = std::env::var("PHQ_LLM_CLIENTS").map_err(|_| LlmError::Config("PHQ_LLM_CLIENTS is not set".into()))?;
        names.split(',').map(str::trim).filter(|n| !n.is_empty()).map(Self::from_env).collect()
    }
}

impl LlmClient for LiveClient {
    fn name(&self) -> &str {
        &self.name
    }

    fn invoke(&self, prompt: &str) -> Result<String, LlmError> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => LlmError::Timeout,
            other => LlmError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| LlmError::Transport(e.to_string()))?;
        match status {
            200..=299 => {}
            429 | 500..=599 => return Err(LlmError::Transport(format!("HTTP {status}: {text}"))),
            _ => return Err(LlmError::Rejected(format!("HTTP {status}: {text}"))),
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| LlmError::Rejected(format!("response is not JSON: {e}")))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::Rejected("response has no choices[0].message.content".into()))
    }

    fn max_concurrency(&self) -> usize {
        self.concurrency
    }

    fn timeout(&self) -> Duration {
        TIMEOUT
    }
}
