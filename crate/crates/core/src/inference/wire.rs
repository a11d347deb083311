//! OpenAI-compatible `/completions` request and response bodies, restricted
//! to the fields the probes use.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub logprobs: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub echo: bool,
}

impl CompletionRequest {
    /// Single-token greedy probe returning the top `k` alternatives.
    pub fn next_token(model: &str, prompt: String, k: usize) -> Self {
        Self {
            model: model.to_string(),
            prompt,
            max_tokens: 1,
            logprobs: k as u32,
            temperature: 0.0,
            echo: false,
        }
    }

    /// Same probe, also echoing per-token logprobs of the prompt itself.
    pub fn echo_prompt(model: &str, prompt: String, k: usize) -> Self {
        Self {
            echo: true,
            ..Self::next_token(model, prompt, k)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CompletionResponse {
    #[serde(default)]
    pub choices: Vec<Choice>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Choice {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub logprobs: Option<Logprobs>,
}

/// Parallel per-token arrays. `top_logprobs[i]` holds the alternatives for
/// token `i`; the first prompt token has none when echoing.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Logprobs {
    #[serde(default)]
    pub tokens: Vec<String>,
    #[serde(default)]
    pub token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    pub top_logprobs: Vec<Option<BTreeMap<String, f64>>>,
    #[serde(default)]
    pub text_offset: Vec<usize>,
}
