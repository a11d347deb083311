use std::time::Duration;

use log::debug;
use ureq::Agent;

use super::wire::{CompletionRequest, CompletionResponse};
use super::{Backend, BackendConfig, FetchError};

/// Blocking client for an OpenAI-compatible completions endpoint.
///
/// `endpoint_url` is the API base (for example `http://localhost:8000/v1`);
/// requests go to `{endpoint_url}/completions`.
pub struct HttpBackend {
    agent: Agent,
    url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            url: format!("{}/completions", config.endpoint_url.trim_end_matches('/')),
            api_key: config.api_key.clone(),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, FetchError> {
        debug!(
            "POST {} model={} logprobs={} echo={} prompt_bytes={}",
            self.url,
            request.model,
            request.logprobs,
            request.echo,
            request.prompt.len()
        );
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(request).map_err(map_ureq)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            debug!("status {status} from {}", self.url);
            return Err(FetchError::HttpStatus(status));
        }
        let body = resp.body_mut().read_to_string().map_err(map_ureq)?;
        debug!("response body: {} bytes", body.len());
        serde_json::from_str(&body).map_err(|e| FetchError::MalformedResponse(e.to_string()))
    }
}

fn map_ureq(err: ureq::Error) -> FetchError {
    match err {
        ureq::Error::Timeout(_) => FetchError::Timeout,
        ureq::Error::StatusCode(code) => FetchError::HttpStatus(code),
        ureq::Error::Json(e) => FetchError::MalformedResponse(e.to_string()),
        other => FetchError::Transport(other.to_string()),
    }
}
