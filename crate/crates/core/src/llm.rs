//! Client contract for text-completion backends, with bounded retries, an audit
//! log and an on-disk response cache.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("missing configuration: {0}")]
    Config(String),
}

/// A prompt-in, text-out model endpoint.
pub trait LlmClient: Send + Sync {
    fn name(&self) -> &str;

    fn invoke(&self, prompt: &str) -> Result<String, LlmError>;

    fn max_concurrency(&self) -> usize {
        1
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs(120)
    }

    /// Prompt budget in whitespace-separated tokens.
    fn context_budget(&self) -> usize {
        100_000
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay: Duration::from_millis(250) }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self { max_attempts, base_delay: Duration::ZERO }
    }
}

/// Calls `client` until it succeeds or `policy.max_attempts` is exhausted, doubling the delay
/// between attempts. Configuration errors are not retried.
pub fn invoke_with_retry(client: &dyn LlmClient, prompt: &str, policy: RetryPolicy) -> Result<String, LlmError> {
    let mut delay = policy.base_delay;
    let mut last = LlmError::Transport("no attempts made".into());
    for attempt in 0..policy.max_attempts.max(1) {
        if attempt > 0 && !delay.is_zero() {
            thread::sleep(delay);
            delay *= 2;
        }
        match client.invoke(prompt) {
            Ok(text) => return Ok(text),
            Err(e @ LlmError::Config(_)) => return Err(e),
            Err(e) => last = e,
        }
    }
    Err(last)
}

#[derive(Serialize)]
struct AuditRecord<'a> {
    client: &'a str,
    purpose: &'a str,
    prompt: &'a str,
    response: Option<&'a str>,
    error: Option<String>,
}

/// Append-only JSON-lines record of every request and response.
pub struct AuditLog {
    file: Mutex<File>,
}

impl AuditLog {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Mutex::new(file) })
    }

    pub fn record(&self, client: &str, purpose: &str, prompt: &str, result: &Result<String, LlmError>) {
        let rec = AuditRecord {
            client,
            purpose,
            prompt,
            response: result.as_ref().ok().map(String::as_str),
            error: result.as_ref().err().map(ToString::to_string),
        };
        let line = serde_json::to_string(&rec).expect("audit record serializes");
        let mut f = self.file.lock().unwrap();
        // audit failures must not abort a labeling run
        let _ = writeln!(f, "{line}");
    }
}

/// Responses stored on disk keyed by `(prompt hash, client name)`.
#[derive(Clone, Debug)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn key(client: &str, prompt: &str) -> String {
        let digest = Sha256::digest(prompt.as_bytes());
        let safe: String = client
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        format!("{safe}-{}", hex::encode(digest))
    }

    fn path(&self, client: &str, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.txt", Self::key(client, prompt)))
    }

    pub fn get(&self, client: &str, prompt: &str) -> Option<String> {
        fs::read_to_string(self.path(client, prompt)).ok()
    }

    pub fn put(&self, client: &str, prompt: &str, response: &str) -> std::io::Result<()> {
        fs::write(self.path(client, prompt), response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        fails: u32,
        calls: AtomicU32,
    }

    impl LlmClient for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn invoke(&self, _prompt: &str) -> Result<String, LlmError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fails { Err(LlmError::Timeout) } else { Ok("ok".into()) }
        }
    }

    #[test]
    fn retries_are_bounded() {
        let c = Flaky { fails: 2, calls: AtomicU32::new(0) };
        assert_eq!(invoke_with_retry(&c, "p", RetryPolicy::immediate(3)).unwrap(), "ok");
        let c = Flaky { fails: 5, calls: AtomicU32::new(0) };
        assert_eq!(invoke_with_retry(&c, "p", RetryPolicy::immediate(3)), Err(LlmError::Timeout));
        assert_eq!(c.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn cache_round_trip_is_keyed_by_client_and_prompt() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path()).unwrap();
        cache.put("a", "prompt", "resp").unwrap();
        assert_eq!(cache.get("a", "prompt").as_deref(), Some("resp"));
        assert_eq!(cache.get("b", "prompt"), None);
        assert_eq!(cache.get("a", "prompt2"), None);
    }
}
