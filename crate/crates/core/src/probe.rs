//! Probe context construction: locating the final answer inside a generated
//! sequence and building the `prefix + \boxed{ + answer prefix` contexts whose
//! next-token distributions make up an entropy trace.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Literal appended after every probed prefix.
pub const BOXED_SUFFIX: &str = "\\boxed{";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProbeError {
    #[error("sample `{0}` has no \\boxed{{...}} answer span and no span override")]
    AnswerNotFound(String),
    #[error("answer span {start}..{end} is invalid for text of length {len}")]
    InvalidSpan { start: usize, end: usize, len: usize },
    #[error("tokens do not concatenate to the sample text")]
    TokenTextMismatch,
    #[error("answer end has not been located for sample `{0}`")]
    AnswerEndUnknown(String),
    #[error("probe position {t} must lie in 1..{answer_end}")]
    PositionOutOfRange { t: usize, answer_end: usize },
    #[error("answer has no tokens")]
    EmptyAnswer,
}

/// Splits text into pieces that concatenate back to the input: words and
/// numbers carry their leading whitespace, every other symbol stands alone.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Whitespace-attaching word/punctuation splitter used when the corpus does
/// not ship model tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimpleTokenizer;

impl Tokenizer for SimpleTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        static PIECE: OnceLock<Regex> = OnceLock::new();
        let re = PIECE.get_or_init(|| Regex::new(r"\s*\w+|\s*[^\w\s]|\s+").expect("valid regex"));
        re.find_iter(text).map(|m| m.as_str().to_string()).collect()
    }
}

/// A generated response split into tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub sample_id: String,
    #[serde(default)]
    pub prompt: String,
    tokens: Vec<String>,
    pub answer_text: String,
    /// 1-based index of the last answer token (T).
    pub answer_end: Option<usize>,
}

impl GeneratedSample {
    pub fn new(
        sample_id: impl Into<String>,
        prompt: impl Into<String>,
        tokens: Vec<String>,
        answer_text: impl Into<String>,
    ) -> Self {
        Self {
            sample_id: sample_id.into(),
            prompt: prompt.into(),
            tokens,
            answer_text: answer_text.into(),
            answer_end: None,
        }
    }

    pub fn from_text(
        sample_id: impl Into<String>,
        prompt: impl Into<String>,
        generated_text: &str,
        answer_text: impl Into<String>,
        tokenizer: &dyn Tokenizer,
    ) -> Self {
        Self::new(sample_id, prompt, tokenizer.tokenize(generated_text), answer_text)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn text(&self) -> String {
        self.tokens.concat()
    }

    /// Locates T and stores it on the sample.
    pub fn with_located_answer(mut self, span_override: Option<(usize, usize)>) -> Result<Self, ProbeError> {
        self.answer_end = Some(locate_answer_end(&self, span_override)?);
        Ok(self)
    }
}

/// Byte range of the content of the last `\boxed{...}` group in `text`.
pub fn last_boxed_span(text: &str) -> Option<(usize, usize)> {
    let open = text.rfind(BOXED_SUFFIX)?;
    let start = open + BOXED_SUFFIX.len();
    let mut depth = 1usize;
    for (i, ch) in text[start..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some((start, start + i));
                }
            }
            _ => {}
        }
    }
    None
}

/// Index T (1-based) of the token that completes the final answer: the one
/// covering the last byte of the last `\boxed{...}` content, or of the
/// override span when one is given. Text after T is ignored.
pub fn locate_answer_end(sample: &GeneratedSample, span_override: Option<(usize, usize)>) -> Result<usize, ProbeError> {
    let text = sample.text();
    let (start, end) = match span_override {
        Some((s, e)) => {
            if s >= e || e > text.len() {
                return Err(ProbeError::InvalidSpan {
                    start: s,
                    end: e,
                    len: text.len(),
                });
            }
            (s, e)
        }
        None => match last_boxed_span(&text) {
            Some((s, e)) if s < e => (s, e),
            _ => return Err(ProbeError::AnswerNotFound(sample.sample_id.clone())),
        },
    };
    let last_byte = end - 1;
    debug_assert!(start <= last_byte);
    let mut offset = 0usize;
    for (i, tok) in sample.tokens.iter().enumerate() {
        offset += tok.len();
        if last_byte < offset {
            return Ok(i + 1);
        }
    }
    Err(ProbeError::TokenTextMismatch)
}

/// Context for probing the final answer token after the first `position`
/// generated tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeContext {
    pub prefix_tokens: Vec<String>,
    pub suffix_literal: String,
    pub answer_prefix_tokens: Vec<String>,
    pub position: usize,
}

impl ProbeContext {
    /// Text form sent to the inference endpoint. The suffix is spliced as a
    /// string and re-tokenized by the server together with the prefix.
    pub fn render(&self) -> String {
        let mut out = self.prefix_tokens.concat();
        out.push_str(&self.suffix_literal);
        for t in &self.answer_prefix_tokens {
            out.push_str(t);
        }
        out
    }
}

pub fn build_probe_context(sample: &GeneratedSample, t: usize, answer_tokens: &[String]) -> Result<ProbeContext, ProbeError> {
    let answer_end = sample
        .answer_end
        .ok_or_else(|| ProbeError::AnswerEndUnknown(sample.sample_id.clone()))?;
    if t == 0 || t >= answer_end {
        return Err(ProbeError::PositionOutOfRange { t, answer_end });
    }
    if answer_tokens.is_empty() {
        return Err(ProbeError::EmptyAnswer);
    }
    Ok(ProbeContext {
        prefix_tokens: sample.tokens[..t].to_vec(),
        suffix_literal: BOXED_SUFFIX.to_string(),
        answer_prefix_tokens: answer_tokens[..answer_tokens.len() - 1].to_vec(),
        position: t,
    })
}

/// Positions 1, 1+stride, ... below `answer_end`, always ending at
/// `answer_end - 1`.
pub fn enumerate_probe_positions(answer_end: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    if answer_end < 2 {
        return Vec::new();
    }
    let last = answer_end - 1;
    let mut positions: Vec<usize> = (1..=last).step_by(stride).collect();
    if positions.last() != Some(&last) {
        positions.push(last);
    }
    positions
}
