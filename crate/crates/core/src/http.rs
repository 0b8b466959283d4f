//! Shared JSON-over-HTTP plumbing for the embedding and completion clients.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Exponential backoff: attempt `k` (1-based) waits `base_delay * 2^(k-1)`
/// before attempt `k + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << (attempt - 1).min(16)))
    }
}

#[derive(Debug)]
pub(crate) enum HttpFailure {
    /// Non-retryable 4xx.
    Request { status: u16, body: String },
    /// Retries exhausted on 429, 5xx or transport errors.
    Transport {
        status: Option<u16>,
        message: String,
        attempts: u32,
    },
    /// 2xx with a body that is not JSON.
    Decode(String),
}

/// Counting semaphore bounding concurrent in-flight requests.
#[derive(Debug)]
pub(crate) struct InFlightLimit {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub(crate) struct Permit<'a>(&'a InFlightLimit);

impl InFlightLimit {
    pub(crate) fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub(crate) fn max(&self) -> usize {
        self.max
    }

    pub(crate) fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.max {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.0.freed.notify_one();
    }
}

fn retryable(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error()
}

fn excerpt(body: &str) -> String {
    body.chars().take(200).collect()
}

/// POSTs `body` and returns the decoded JSON response with the number of
/// attempts it took.
pub(crate) fn post_json(
    client: &Client,
    url: &str,
    token: Option<&str>,
    body: &Value,
    policy: &RetryPolicy,
) -> Result<(Value, u32), HttpFailure> {
    let max_attempts = policy.max_attempts.max(1);
    let mut attempt = 0;
    loop {
        attempt += 1;
        let mut req = client.post(url).json(body);
        if let Some(token) = token {
            req = req.bearer_auth(token);
        }
        let (status, message) = match req.send() {
            Ok(resp) => {
                let status = resp.status();
                let text = resp.text().unwrap_or_default();
                if status.is_success() {
                    return serde_json::from_str(&text)
                        .map(|v| (v, attempt))
                        .map_err(|e| HttpFailure::Decode(e.to_string()));
                }
                if !retryable(status) {
                    return Err(HttpFailure::Request {
                        status: status.as_u16(),
                        body: excerpt(&text),
                    });
                }
                (Some(status.as_u16()), excerpt(&text))
            }
            Err(e) => (e.status().map(|s| s.as_u16()), e.to_string()),
        };
        if attempt >= max_attempts {
            return Err(HttpFailure::Transport {
                status,
                message,
                attempts: attempt,
            });
        }
        log::warn!("POST {url} failed (attempt {attempt}, status {status:?}); retrying");
        thread::sleep(policy.delay(attempt));
    }
}
