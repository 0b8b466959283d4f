//! Completion environments: a deterministic mock and an HTTP chat client.

use std::sync::Arc;
use std::time::Instant;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::CandidateExample;
use crate::embedder::{cosine, EmbedError, Embedder, EmbeddingVector};
use crate::http::{self, HttpFailure, InFlightLimit};
use crate::promptgen::PromptTemplate;

pub use crate::http::RetryPolicy;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("prompt does not follow the template: {0}")]
    Protocol(String),
    #[error("request rejected with status {status}: {body}")]
    Request { status: u16, body: String },
    #[error("transport failure after {attempts} attempt(s) (status {status:?}): {message}")]
    Transport {
        status: Option<u16>,
        message: String,
        attempts: u32,
    },
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

impl From<HttpFailure> for EnvError {
    fn from(f: HttpFailure) -> Self {
        match f {
            HttpFailure::Request { status, body } => EnvError::Request { status, body },
            HttpFailure::Transport {
                status,
                message,
                attempts,
            } => EnvError::Transport {
                status,
                message,
                attempts,
            },
            HttpFailure::Decode(m) => EnvError::Decode(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    /// Overrides the environment's configured model (HTTP only).
    pub model: Option<String>,
}

impl CompletionRequest {
    /// Temperature 0 and 256 max tokens.
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: 256,
            temperature: 0.0,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub latency_ms: f64,
    pub provider_meta: Value,
}

pub trait Environment: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, EnvError>;

    /// Concurrent requests this environment is willing to serve.
    fn max_in_flight(&self) -> usize {
        1
    }
}

/// Echoes the response of the in-context example whose query is most
/// cosine-similar to the final instruction.
pub struct MockEnv {
    template: PromptTemplate,
    embedder: Arc<dyn Embedder>,
    blocks: Vec<String>,
    pool: Vec<CandidateExample>,
    query_vecs: Vec<EmbeddingVector>,
}

/// An in-context example and the final instruction recovered from a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPrompt {
    /// Pool indices in prompt order.
    pub examples: Vec<usize>,
    pub instruction: String,
}

impl MockEnv {
    pub fn new(
        pool: Vec<CandidateExample>,
        embedder: Arc<dyn Embedder>,
        template: PromptTemplate,
    ) -> Result<Self, EnvError> {
        let blocks = pool.iter().map(|e| template.render_example(e)).collect();
        let query_vecs = pool
            .iter()
            .map(|e| embedder.embed_text(&e.query))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            template,
            embedder,
            blocks,
            pool,
            query_vecs,
        })
    }

    pub fn parse(&self, prompt: &str) -> Result<ParsedPrompt, EnvError> {
        let joiner = self.template.joiner();
        let mut rest = prompt;
        let preamble = self.template.preamble();
        if !preamble.is_empty() {
            rest = rest
                .strip_prefix(preamble)
                .and_then(|r| r.strip_prefix(joiner))
                .ok_or_else(|| EnvError::Protocol("missing preamble".into()))?;
        }
        let mut examples = Vec::new();
        'blocks: loop {
            for (i, block) in self.blocks.iter().enumerate() {
                if let Some(r) = rest.strip_prefix(block.as_str()).and_then(|r| r.strip_prefix(joiner)) {
                    examples.push(i);
                    rest = r;
                    continue 'blocks;
                }
            }
            break;
        }
        let marker = "\u{0}";
        let shape = self.template.render_query(marker);
        let (head, tail) = shape.split_once(marker).expect("query block has a placeholder");
        let instruction = rest
            .strip_prefix(head)
            .and_then(|r| r.strip_suffix(tail))
            .ok_or_else(|| EnvError::Protocol("final query block not found".into()))?;
        Ok(ParsedPrompt {
            examples,
            instruction: instruction.to_owned(),
        })
    }
}

impl Environment for MockEnv {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, EnvError> {
        let start = Instant::now();
        let parsed = self.parse(&request.prompt)?;
        let target = self.embedder.embed_text(&parsed.instruction)?;
        let mut best: Option<(f64, usize)> = None;
        for &i in &parsed.examples {
            let c = cosine(&self.query_vecs[i], &target)?;
            if best.is_none_or(|(b, _)| c > b) {
                best = Some((c, i));
            }
        }
        let text = best.map(|(_, i)| self.pool[i].response.clone()).unwrap_or_default();
        Ok(CompletionResponse {
            text,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
            provider_meta: json!({ "provider": "mock", "examples": parsed.examples }),
        })
    }

    fn max_in_flight(&self) -> usize {
        usize::MAX
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpEnvConfig {
    pub base_url: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for HttpEnvConfig {
    fn default() -> Self {
        Self {
            base_url: None,
            model: None,
            token_env: None,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

/// OpenAI-style `POST {base_url}/chat/completions` client.
pub struct HttpEnv {
    client: Client,
    url: String,
    model: String,
    token: Option<String>,
    retry: RetryPolicy,
    limit: InFlightLimit,
}

impl HttpEnv {
    pub fn new(config: &HttpEnvConfig) -> Result<Self, EnvError> {
        let base = config
            .base_url
            .as_deref()
            .ok_or_else(|| EnvError::Config("http env needs `base_url`".into()))?;
        let model = config
            .model
            .clone()
            .ok_or_else(|| EnvError::Config("http env needs `model`".into()))?;
        let token = match &config.token_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| EnvError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        Ok(Self {
            client: Client::new(),
            url: format!("{}/chat/completions", base.trim_end_matches('/')),
            model,
            token,
            retry: config.retry,
            limit: InFlightLimit::new(config.max_in_flight),
        })
    }
}

impl Environment for HttpEnv {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, EnvError> {
        let body = json!({
            "model": request.model.as_deref().unwrap_or(&self.model),
            "messages": [{ "role": "user", "content": request.prompt }],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let _permit = self.limit.acquire();
        let start = Instant::now();
        let (value, attempts) = http::post_json(&self.client, &self.url, self.token.as_deref(), &body, &self.retry)?;
        let text = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| EnvError::Decode("response lacks choices[0].message.content".into()))?
            .to_owned();
        Ok(CompletionResponse {
            text,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
            provider_meta: json!({ "provider": "http", "attempts": attempts, "model": value.get("model") }),
        })
    }

    fn max_in_flight(&self) -> usize {
        self.limit.max()
    }
}
