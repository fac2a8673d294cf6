//! Clients for external model services (completion and embedding endpoints)
//! and the sharded evaluation runner that drives them.
//!
//! Wire contract, relative to the configured base URL:
//!
//! * `POST {base}/completions` with
//!   `{"model", "prompt", "max_tokens", "temperature", "n", "extensions": {...}}`;
//!   the reply's `choices[0].text` is the raw output.
//! * `POST {base}/embeddings` with `{"model", "input": [..]}`; the reply's
//!   `data[i].embedding` vectors are returned in `data[i].index` order.

mod client;
mod runner;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use client::{Completion, CompletionEndpoint, EmbeddingEndpoint, HttpEndpoint};
pub use runner::{
    prompt_hash, run_evaluation, shard_ranges, CaseEntry, PreparedCase, RunError, RunHeader, RunManifest,
    RunStore, CASES_FILE, HEADER_FILE,
};

/// Environment variable consulted for the endpoint base URL.
pub const ENDPOINT_ENV: &str = "CLAIMBENCH_ENDPOINT";
/// Default environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "CLAIMBENCH_API_KEY";

/// Decoding settings sent with every completion request. The defaults are
/// greedy decoding: no sampling, one beam, temperature 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_new_tokens: u32,
    pub repetition_penalty: f64,
    pub temperature: f64,
    pub do_sample: bool,
    pub num_beams: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            max_new_tokens: 512,
            repetition_penalty: 1.1,
            temperature: 0.0,
            do_sample: false,
            num_beams: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub initial_backoff: Duration,
    pub multiplier: f64,
    #[serde(with = "millis")]
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            initial_backoff: Duration::from_millis(500),
            multiplier: 2.0,
            max_backoff: Duration::from_secs(10),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = self.multiplier.powi(retry.saturating_sub(1) as i32);
        self.initial_backoff.mul_f64(factor).min(self.max_backoff)
    }
}

/// Where and how to reach a model service. The bearer token is never part
/// of this struct; only the name of the variable that holds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub api_key_env: Option<String>,
    #[serde(with = "millis")]
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: Some(API_KEY_ENV.to_string()),
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GatewayError {
    #[error("transport error: {message}")]
    Transport { message: String },
    #[error("request timed out")]
    Timeout,
    #[error("endpoint rejected credentials (HTTP {status})")]
    AuthRejected { status: u16 },
    #[error("endpoint returned HTTP {status}: {body}")]
    NonRetryableStatus { status: u16, body: String },
    #[error("endpoint kept failing with HTTP {status}")]
    RetryableStatus { status: u16 },
    #[error("malformed endpoint response: {message}")]
    MalformedResponse { message: String },
    #[error("embedding {index}: expected dimension {expected}, got {got}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("invalid endpoint configuration: {message}")]
    Config { message: String },
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::Transport { .. } | GatewayError::Timeout | GatewayError::RetryableStatus { .. }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_params_are_greedy() {
        let p = GenerationParams::default();
        assert_eq!(p.max_new_tokens, 512);
        assert_eq!(p.repetition_penalty, 1.1);
        assert_eq!(p.temperature, 0.0);
        assert!(!p.do_sample);
        assert_eq!(p.num_beams, 1);
    }

    #[test]
    fn backoff_grows_and_caps() {
        let r = RetryPolicy {
            max_attempts: 5,
            initial_backoff: Duration::from_millis(100),
            multiplier: 2.0,
            max_backoff: Duration::from_millis(300),
        };
        assert_eq!(r.backoff(1), Duration::from_millis(100));
        assert_eq!(r.backoff(2), Duration::from_millis(200));
        assert_eq!(r.backoff(3), Duration::from_millis(300));
    }

    #[test]
    fn config_serializes_without_secret() {
        let c = EndpointConfig::new("http://localhost:1/v1", "m");
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("CLAIMBENCH_API_KEY"));
        let back: EndpointConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }
}
