//! Blocking JSON-over-HTTP with bounded retries, shared by the chat and
//! embedding clients.

use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const API_KEY_ENV: &str = "FEWSHOT_REC_API_KEY";

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("undecodable response: {0}")]
    Decode(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<HttpError> },
}

impl HttpError {
    /// Transport failures, throttling and server errors are worth retrying.
    pub fn is_retriable(&self) -> bool {
        match self {
            HttpError::Transport(_) => true,
            HttpError::Status { status, .. } => *status == 429 || *status >= 500,
            HttpError::Decode(_) => false,
            HttpError::Exhausted { .. } => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 4, initial_backoff_ms: 500, max_backoff_ms: 8_000 }
    }
}

impl RetryPolicy {
    pub fn no_wait(max_attempts: u32) -> Self {
        RetryPolicy { max_attempts, initial_backoff_ms: 0, max_backoff_ms: 0 }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.initial_backoff_ms.saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(self.max_backoff_ms))
    }

    /// Runs `op` until it succeeds, fails with a non-retriable error, or
    /// `max_attempts` is reached.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, HttpError>) -> Result<T, HttpError> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if !e.is_retriable() => return Err(e),
                Err(e) => {
                    attempt += 1;
                    if attempt >= attempts {
                        return Err(HttpError::Exhausted { attempts, last: Box::new(e) });
                    }
                    let wait = self.backoff(attempt - 1);
                    warn!("request failed ({e}); retry {attempt}/{} in {wait:?}", attempts - 1);
                    thread::sleep(wait);
                }
            }
        }
    }
}

const MAX_BODY_BYTES: u64 = 512 * 1024 * 1024;

/// Single POST attempt. Non-2xx statuses come back as [`HttpError::Status`].
pub fn post_json(url: &str, api_key: Option<&str>, body: &Value, timeout: Duration) -> Result<Value, HttpError> {
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).timeout_global(Some(timeout)).build().into();
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(key) = api_key {
        req = req.header("Authorization", format!("Bearer {key}"));
    }
    debug!("POST {url}");
    let mut resp = req.send_json(body).map_err(|e| HttpError::Transport(e.to_string()))?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().with_config().limit(MAX_BODY_BYTES).read_to_string().map_err(|e| HttpError::Transport(e.to_string()))?;
    if !(200..300).contains(&status) {
        return Err(HttpError::Status { status, body: text });
    }
    serde_json::from_str(&text).map_err(|e| HttpError::Decode(e.to_string()))
}

pub fn api_key_from_env() -> Option<String> {
    std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty())
}

pub(crate) fn join_url(endpoint: &str, path: &str) -> String {
    format!("{}/{}", endpoint.trim_end_matches('/'), path.trim_start_matches('/'))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retries_then_succeeds() {
        let calls = Cell::new(0);
        let out = RetryPolicy::no_wait(3).run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 3 {
                Err(HttpError::Status { status: 503, body: String::new() })
            } else {
                Ok(7)
            }
        });
        assert_eq!(out.unwrap(), 7);
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let calls = Cell::new(0);
        let out: Result<(), _> = RetryPolicy::no_wait(5).run(|| {
            calls.set(calls.get() + 1);
            Err(HttpError::Status { status: 400, body: "bad".into() })
        });
        assert!(matches!(out, Err(HttpError::Status { status: 400, .. })));
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn exhaustion_is_reported() {
        let out: Result<(), _> = RetryPolicy::no_wait(2).run(|| Err(HttpError::Transport("down".into())));
        assert!(matches!(out, Err(HttpError::Exhausted { attempts: 2, .. })));
    }

    #[test]
    fn url_join() {
        assert_eq!(join_url("http://h/v1/", "/chat/completions"), "http://h/v1/chat/completions");
    }
}
