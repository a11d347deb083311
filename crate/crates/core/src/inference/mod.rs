//! Harvesting top-K next-token distributions from a completions endpoint.

mod harvest;
mod http;
pub mod synthetic;
pub mod wire;

use std::thread;
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{MetricError, TokenDistribution};

pub use harvest::{
    harvest_corpus, harvest_trace, load_trace_records, AssembledTrace, HarvestReport, HarvestTarget, HarvestedTrace, PositionFailure,
    TopLogprob, TraceRecord, TraceSet,
};
pub use http::HttpBackend;
pub use synthetic::{synthetic_distribution, Archetype, SyntheticBackend, SyntheticProfile};
use wire::{CompletionRequest, CompletionResponse};

/// Retained alternatives per probe unless configured otherwise.
pub const DEFAULT_TOP_K: usize = 20;
/// Vocabulary size assumed for truncation bounds unless configured otherwise.
pub const DEFAULT_VOCAB_SIZE: usize = 151_665;

pub const ENV_ENDPOINT_URL: &str = "EAS_ENDPOINT_URL";
pub const ENV_API_KEY: &str = "EAS_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FetchError {
    #[error("request timed out")]
    Timeout,
    #[error("endpoint returned HTTP {0}")]
    HttpStatus(u16),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("transport error: {0}")]
    Transport(String),
}

impl From<MetricError> for FetchError {
    fn from(e: MetricError) -> Self {
        FetchError::MalformedResponse(e.to_string())
    }
}

/// Anything that can answer a completions request.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, FetchError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, FetchError> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, FetchError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff_base_secs: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            backoff_base_secs: 0.5,
        }
    }
}

impl RetryPolicy {
    /// Sleep before attempt `attempt` (1-based); zero for the first.
    pub fn delay_before(&self, attempt: u32) -> Duration {
        if attempt <= 1 {
            return Duration::ZERO;
        }
        let factor = 2f64.powi(attempt as i32 - 2);
        Duration::from_secs_f64((self.backoff_base_secs * factor).max(0.0))
    }

    /// Runs `op` until it succeeds or `max_attempts` is spent, returning the
    /// last error.
    pub fn run<T>(&self, mut op: impl FnMut(u32) -> Result<T, FetchError>) -> Result<T, FetchError> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if attempt >= attempts => return Err(e),
                Err(e) => {
                    warn!("attempt {attempt}/{attempts} failed: {e}");
                    attempt += 1;
                    let delay = self.delay_before(attempt);
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub endpoint_url: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    pub model_name: String,
    pub top_k: usize,
    pub vocab_size: usize,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://localhost:8000/v1".to_string(),
            api_key: None,
            model_name: "default".to_string(),
            top_k: DEFAULT_TOP_K,
            vocab_size: DEFAULT_VOCAB_SIZE,
            timeout_secs: 60.0,
            max_in_flight: 8,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("top_k must be at least 1")]
    ZeroTopK,
    #[error("max_in_flight must be at least 1")]
    ZeroInFlight,
    #[error("top_k {top_k} must be below vocab_size {vocab_size}")]
    TopKTooLarge { top_k: usize, vocab_size: usize },
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.top_k == 0 {
            return Err(ConfigError::ZeroTopK);
        }
        if self.max_in_flight == 0 {
            return Err(ConfigError::ZeroInFlight);
        }
        if self.top_k >= self.vocab_size {
            return Err(ConfigError::TopKTooLarge {
                top_k: self.top_k,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Replaces endpoint URL and API key with the environment values when set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(url) = std::env::var(ENV_ENDPOINT_URL) {
            if !url.is_empty() {
                self.endpoint_url = url;
            }
        }
        if let Ok(key) = std::env::var(ENV_API_KEY) {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
        self
    }
}

/// Converts one `top_logprobs` entry into a distribution, keeping at most
/// `top_k` of the most probable tokens.
pub fn distribution_from_top(
    top: &std::collections::BTreeMap<String, f64>,
    top_k: usize,
    vocab_size: usize,
) -> Result<TokenDistribution, FetchError> {
    let mut pairs: Vec<(&String, f64)> = top.iter().map(|(t, lp)| (t, *lp)).collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1));
    pairs.truncate(top_k);
    Ok(TokenDistribution::from_logprobs(
        pairs.into_iter().map(|(t, lp)| (t.clone(), lp)),
        vocab_size,
    )?)
}

fn parse_next_token(resp: &CompletionResponse, config: &BackendConfig) -> Result<TokenDistribution, FetchError> {
    let top = resp
        .choices
        .first()
        .and_then(|c| c.logprobs.as_ref())
        .and_then(|lp| lp.top_logprobs.first())
        .and_then(|t| t.as_ref())
        .ok_or_else(|| FetchError::MalformedResponse("response carries no top_logprobs".into()))?;
    if top.is_empty() {
        return Err(FetchError::MalformedResponse("empty top_logprobs".into()));
    }
    distribution_from_top(top, config.top_k, config.vocab_size)
}

/// Probes the next-token distribution after `context_text`, retrying per the
/// configured policy.
pub fn fetch_topk_distribution(
    backend: &dyn Backend,
    config: &BackendConfig,
    context_text: &str,
) -> Result<TokenDistribution, FetchError> {
    if context_text.is_empty() {
        return Err(FetchError::Transport("empty probe context".into()));
    }
    let request = CompletionRequest::next_token(&config.model_name, context_text.to_string(), config.top_k);
    config.retry.run(|_| {
        let resp = backend.complete(&request)?;
        parse_next_token(&resp, config)
    })
}
