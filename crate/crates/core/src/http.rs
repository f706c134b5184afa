//! Blocking JSON POST with bounded retries, shared by the embedding and chat clients.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("{message} (after {attempts} attempt(s))")]
pub struct TransportError {
    pub message: String,
    pub attempts: u32,
    pub status: Option<u16>,
    /// Server-requested delay from the last `Retry-After` header, if any.
    pub retry_after: Option<Duration>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff_ms: 500,
            max_backoff_ms: 8_000,
            timeout_secs: 60,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(16))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

fn retryable(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS || status == StatusCode::REQUEST_TIMEOUT || status.is_server_error()
}

fn parse_retry_after(resp: &reqwest::blocking::Response) -> Option<Duration> {
    resp.headers()
        .get(reqwest::header::RETRY_AFTER)?
        .to_str()
        .ok()?
        .trim()
        .parse::<u64>()
        .ok()
        .map(Duration::from_secs)
}

pub struct JsonClient {
    client: Client,
    policy: RetryPolicy,
}

impl JsonClient {
    pub fn new(policy: RetryPolicy) -> Result<Self, TransportError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(policy.timeout_secs))
            .build()
            .map_err(|e| TransportError {
                message: format!("cannot build HTTP client: {e}"),
                attempts: 0,
                status: None,
                retry_after: None,
            })?;
        Ok(Self { client, policy })
    }

    /// POSTs `body` and returns the parsed JSON response. Connection failures,
    /// 408, 429 and 5xx are retried with exponential backoff; other statuses fail at once.
    pub fn post_json<T: Serialize + ?Sized>(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &T,
    ) -> Result<serde_json::Value, TransportError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            let mut req = self.client.post(url).json(body);
            if let Some(key) = bearer {
                req = req.bearer_auth(key);
            }
            let (message, status, retry_after, can_retry) = match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp.json().map_err(|e| TransportError {
                        message: format!("invalid JSON from {url}: {e}"),
                        attempts: attempt,
                        status: None,
                        retry_after: None,
                    });
                }
                Ok(resp) => {
                    let status = resp.status();
                    let retry_after = parse_retry_after(&resp);
                    let text = resp.text().unwrap_or_default();
                    (
                        format!(
                            "{url} returned {status}: {}",
                            text.chars().take(200).collect::<String>()
                        ),
                        Some(status.as_u16()),
                        retry_after,
                        retryable(status),
                    )
                }
                Err(e) => (format!("request to {url} failed: {e}"), None, None, true),
            };
            if !can_retry || attempt > self.policy.max_retries {
                return Err(TransportError {
                    message,
                    attempts: attempt,
                    status,
                    retry_after,
                });
            }
            let wait = retry_after
                .map(|d| d.min(Duration::from_millis(self.policy.max_backoff_ms)))
                .unwrap_or_else(|| self.policy.backoff(attempt - 1));
            std::thread::sleep(wait);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            initial_backoff_ms: 100,
            max_backoff_ms: 350,
            ..Default::default()
        };
        assert_eq!(p.backoff(0), Duration::from_millis(100));
        assert_eq!(p.backoff(1), Duration::from_millis(200));
        assert_eq!(p.backoff(2), Duration::from_millis(350));
    }

    #[test]
    fn unreachable_endpoint_fails_after_retries() {
        let client = JsonClient::new(RetryPolicy {
            max_retries: 2,
            initial_backoff_ms: 1,
            max_backoff_ms: 2,
            timeout_secs: 2,
        })
        .unwrap();
        // Port 9 on localhost: nothing listens there in the test sandbox.
        let err = client
            .post_json("http://127.0.0.1:9/v1/x", None, &serde_json::json!({}))
            .unwrap_err();
        assert_eq!(err.attempts, 3);
        assert!(err.status.is_none());
    }
}
