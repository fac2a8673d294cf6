use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{EndpointConfig, GatewayError, GenerationParams};

/// A completion and the number of HTTP attempts it took.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

/// A text-completion service. Implementations must be callable from many
/// threads at once.
pub trait CompletionEndpoint: Send + Sync {
    fn model(&self) -> &str;

    /// Returns the raw continuation, or the final error together with the
    /// number of attempts made.
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, (GatewayError, u32)>;
}

pub trait EmbeddingEndpoint: Send + Sync {
    /// One vector of length `dim` per input text, in input order.
    fn embed(&self, texts: &[String], dim: usize) -> Result<Vec<Vec<f32>>, GatewayError>;
}

struct Secret(String);

impl std::fmt::Debug for Secret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("<redacted>")
    }
}

/// Completions/embeddings client over JSON-over-HTTP with retry and
/// exponential backoff on transport errors, timeouts, 408, 429 and 5xx.
#[derive(Debug)]
pub struct HttpEndpoint {
    config: EndpointConfig,
    client: Client,
    token: Option<Secret>,
}

impl HttpEndpoint {
    /// Builds a client; the bearer token, if any, is read from the
    /// environment variable named in the config.
    pub fn new(config: EndpointConfig) -> Result<Self, GatewayError> {
        let token = config
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|t| !t.is_empty())
            .map(Secret);
        Self::with_token(config, token.map(|s| s.0))
    }

    pub fn with_token(config: EndpointConfig, token: Option<String>) -> Result<Self, GatewayError> {
        let url = config.base_url.trim();
        if !(url.starts_with("http://") || url.starts_with("https://")) {
            return Err(GatewayError::Config {
                message: format!("base URL `{url}` must start with http:// or https://"),
            });
        }
        if config.retry.max_attempts == 0 {
            return Err(GatewayError::Config {
                message: "retry.max_attempts must be at least 1".into(),
            });
        }
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Config { message: e.to_string() })?;
        Ok(HttpEndpoint {
            config,
            client,
            token: token.map(Secret),
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim().trim_end_matches('/'), path)
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value, GatewayError> {
        let mut req = self.client.post(url).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(&token.0);
        }
        let resp = req.send().map_err(transport_error)?;
        let status = resp.status();
        if status.is_success() {
            let text = resp.text().map_err(transport_error)?;
            return serde_json::from_str(&text).map_err(|e| GatewayError::MalformedResponse {
                message: e.to_string(),
            });
        }
        match status {
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => Err(GatewayError::AuthRejected {
                status: status.as_u16(),
            }),
            StatusCode::REQUEST_TIMEOUT | StatusCode::TOO_MANY_REQUESTS => Err(GatewayError::RetryableStatus {
                status: status.as_u16(),
            }),
            s if s.is_server_error() => Err(GatewayError::RetryableStatus { status: s.as_u16() }),
            s => {
                let body: String = resp.text().unwrap_or_default().chars().take(200).collect();
                Err(GatewayError::NonRetryableStatus { status: s.as_u16(), body })
            }
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<(Value, u32), (GatewayError, u32)> {
        let url = self.url(path);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.post_once(&url, body) {
                Ok(v) => return Ok((v, attempt)),
                Err(e) if e.is_retryable() && attempt < self.config.retry.max_attempts => {
                    let delay = self.config.retry.backoff(attempt);
                    log::warn!("{path}: attempt {attempt} failed ({e}); retrying in {delay:?}");
                    sleep(delay);
                }
                Err(e) => return Err((e, attempt)),
            }
        }
    }
}

fn sleep(d: Duration) {
    if !d.is_zero() {
        thread::sleep(d);
    }
}

fn transport_error(e: reqwest::Error) -> GatewayError {
    if e.is_timeout() {
        GatewayError::Timeout
    } else {
        // Strip the URL; it is not secret but makes messages noisy.
        GatewayError::Transport {
            message: e.without_url().to_string(),
        }
    }
}

impl CompletionEndpoint for HttpEndpoint {
    fn model(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, (GatewayError, u32)> {
        let body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": params.max_new_tokens,
            "temperature": params.temperature,
            "n": 1,
            "extensions": {
                "repetition_penalty": params.repetition_penalty,
                "do_sample": params.do_sample,
                "num_beams": params.num_beams,
            },
        });
        let (reply, attempts) = self.post("completions", &body)?;
        match reply.pointer("/choices/0/text").and_then(Value::as_str) {
            Some(text) => Ok(Completion {
                text: text.to_string(),
                attempts,
            }),
            None => Err((
                GatewayError::MalformedResponse {
                    message: "missing choices[0].text".into(),
                },
                attempts,
            )),
        }
    }
}

impl EmbeddingEndpoint for HttpEndpoint {
    fn embed(&self, texts: &[String], dim: usize) -> Result<Vec<Vec<f32>>, GatewayError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = json!({ "model": self.config.model, "input": texts });
        let (reply, _) = self.post("embeddings", &body).map_err(|(e, _)| e)?;
        let malformed = |message: String| GatewayError::MalformedResponse { message };
        let data = reply
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("missing `data` array".into()))?;
        if data.len() != texts.len() {
            return Err(malformed(format!("{} embeddings for {} inputs", data.len(), texts.len())));
        }
        let mut out: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
            let vector: Vec<f32> = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| malformed(format!("item {pos} has no `embedding`")))?
                .iter()
                .map(|x| x.as_f64().map(|f| f as f32))
                .collect::<Option<_>>()
                .ok_or_else(|| malformed(format!("item {pos} has a non-numeric component")))?;
            if vector.len() != dim {
                return Err(GatewayError::DimensionMismatch {
                    index,
                    expected: dim,
                    got: vector.len(),
                });
            }
            let slot = out
                .get_mut(index)
                .ok_or_else(|| malformed(format!("index {index} out of range")))?;
            *slot = Some(vector);
        }
        out.into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| malformed(format!("no embedding for input {i}"))))
            .collect()
    }
}
