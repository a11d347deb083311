//! Deterministic stand-in for a model endpoint.
//!
//! Each synthetic sample carries its generating profile in a one-line prompt
//! header, so the backend can answer probe requests from the request text
//! alone, exactly as a real server would.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::wire::{Choice, CompletionRequest, CompletionResponse, Logprobs};
use super::{Backend, FetchError};
use crate::metrics::{TokenDistribution, TokenProb};
use crate::probe::{SimpleTokenizer, Tokenizer, BOXED_SUFFIX};
use crate::trajectory::{decayed_cumulative_option_probs, leader, OptionSeries, DEFAULT_ALPHA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    /// One option takes over within the first tenth of the steps and keeps
    /// at least 0.95 of the mass.
    EarlyLockin,
    /// One option leads for the first half, another after it.
    MidReversal,
    /// Every option stays within 0.05 of uniform.
    PersistentTie,
    /// All mass on the first option.
    PointMass,
    /// Exactly uniform over the options.
    Uniform,
}

impl Archetype {
    pub const BEHAVIORAL: [Archetype; 3] = [Archetype::EarlyLockin, Archetype::MidReversal, Archetype::PersistentTie];

    pub fn as_str(self) -> &'static str {
        match self {
            Archetype::EarlyLockin => "early_lockin",
            Archetype::MidReversal => "mid_reversal",
            Archetype::PersistentTie => "persistent_tie",
            Archetype::PointMass => "point_mass",
            Archetype::Uniform => "uniform",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Archetype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "early_lockin" => Ok(Archetype::EarlyLockin),
            "mid_reversal" => Ok(Archetype::MidReversal),
            "persistent_tie" => Ok(Archetype::PersistentTie),
            "point_mass" => Ok(Archetype::PointMass),
            "uniform" => Ok(Archetype::Uniform),
            other => Err(format!("unknown archetype `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyntheticProfile {
    pub archetype: Archetype,
    /// Number of probe steps.
    pub length: usize,
    pub seed: u64,
    pub option_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SyntheticError {
    #[error("position {t} is outside 1..={length}")]
    PositionOutOfRange { t: usize, length: usize },
    #[error("profile length must be at least {0}")]
    TooShort(usize),
    #[error("option count must be between 2 and 26")]
    BadOptionCount,
    #[error("malformed synthetic header: {0}")]
    BadHeader(String),
}

const HEADER_OPEN: &str = "<<synthetic ";
const HEADER_CLOSE: &str = ">>\n";

/// Shortest profile that still leaves room for `\boxed{X}` after one word.
pub const MIN_SAMPLE_LENGTH: usize = 4;

pub fn option_labels(n: usize) -> Vec<String> {
    (0..n).map(|i| ((b'A' + i as u8) as char).to_string()).collect()
}

impl SyntheticProfile {
    pub fn new(archetype: Archetype, length: usize, seed: u64, option_count: usize) -> Result<Self, SyntheticError> {
        if length < 2 {
            return Err(SyntheticError::TooShort(2));
        }
        if !(2..=26).contains(&option_count) {
            return Err(SyntheticError::BadOptionCount);
        }
        Ok(Self {
            archetype,
            length,
            seed,
            option_count,
        })
    }

    pub fn options(&self) -> Vec<String> {
        option_labels(self.option_count)
    }

    fn primary(&self) -> usize {
        (self.seed % self.option_count as u64) as usize
    }

    fn secondary(&self) -> usize {
        let n = self.option_count as u64;
        let hop = 1 + (self.seed / n) % (n - 1);
        ((self.primary() as u64 + hop) % n) as usize
    }

    /// Counter-based noise source for step `t`: independent of every other
    /// step and of evaluation order.
    fn noise(&self, t: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.archetype.stream());
        rng.set_word_pos(t as u128 * 128);
        rng
    }

    /// Option probabilities at step `t`; the remainder is unreturned tail.
    pub fn option_probs(&self, t: usize) -> Result<Vec<f64>, SyntheticError> {
        if t == 0 || t > self.length {
            return Err(SyntheticError::PositionOutOfRange { t, length: self.length });
        }
        let n = self.option_count;
        let nf = n as f64;
        let mut rng = self.noise(t);
        let tail = 0.0005 + 0.0025 * rng.random::<f64>();
        let mut probs = match self.archetype {
            Archetype::PointMass => {
                let mut p = vec![0.0; n];
                p[0] = 1.0;
                return Ok(p);
            }
            Archetype::Uniform => return Ok(vec![1.0 / nf; n]),
            Archetype::EarlyLockin => {
                let ramp_end = (self.length as f64 * 0.1).floor().max(1.0);
                let progress = (t as f64 / ramp_end).min(1.0);
                let top = 1.0 / nf + (0.97 - 1.0 / nf) * progress - 0.01 * rng.random::<f64>();
                let weights: Vec<f64> = (0..n - 1).map(|_| 0.5 + rng.random::<f64>()).collect();
                let wsum: f64 = weights.iter().sum();
                let mut p = Vec::with_capacity(n);
                let mut others = weights.iter().map(|w| (1.0 - top) * w / wsum);
                for i in 0..n {
                    p.push(if i == self.primary() { top } else { others.next().unwrap() });
                }
                p
            }
            Archetype::MidReversal => {
                let u = t as f64 / self.length as f64;
                let s = ((u - 0.4) / 0.2).clamp(0.0, 1.0);
                let minor = 0.15 / (nf - 1.0);
                let mut p: Vec<f64> = (0..n).map(|_| minor + 0.01 * (rng.random::<f64>() - 0.5)).collect();
                p[self.primary()] = 0.85 * (1.0 - s) + minor * s;
                p[self.secondary()] = minor * (1.0 - s) + 0.85 * s;
                let sum: f64 = p.iter().sum();
                p.iter_mut().for_each(|v| *v /= sum);
                p
            }
            Archetype::PersistentTie => {
                let amp = 0.08 / nf;
                let jitter: Vec<f64> = (0..n).map(|_| amp * (2.0 * rng.random::<f64>() - 1.0)).collect();
                let centre = jitter.iter().sum::<f64>() / nf;
                jitter.iter().map(|j| 1.0 / nf + j - centre).collect()
            }
        };
        probs.iter_mut().for_each(|p| *p *= 1.0 - tail);
        Ok(probs)
    }

    /// Option the synthetic model writes in its final `\boxed{}`.
    pub fn emitted_answer(&self) -> usize {
        match self.archetype {
            Archetype::EarlyLockin => self.primary(),
            Archetype::MidReversal => self.secondary(),
            Archetype::PointMass | Archetype::Uniform => 0,
            Archetype::PersistentTie => {
                let rows: Vec<Vec<f64>> = (1..=self.length).map(|t| self.option_probs(t).expect("in range")).collect();
                let series = OptionSeries::new(self.options(), rows, DEFAULT_ALPHA).expect("valid synthetic rows");
                let curves = decayed_cumulative_option_probs(&series);
                leader(curves.last().expect("length >= 2")).unwrap_or(0)
            }
        }
    }

    /// Distribution that repeated sampling of the final answer follows.
    pub fn answer_distribution(&self) -> Vec<f64> {
        let n = self.option_count;
        let nf = n as f64;
        let emitted = self.emitted_answer();
        match self.archetype {
            Archetype::PointMass => (0..n).map(|i| if i == emitted { 1.0 } else { 0.0 }).collect(),
            Archetype::Uniform | Archetype::PersistentTie => vec![1.0 / nf; n],
            Archetype::EarlyLockin => (0..n).map(|i| if i == emitted { 0.99 } else { 0.01 / (nf - 1.0) }).collect(),
            Archetype::MidReversal => {
                let rest = if n > 2 { 0.1 / (nf - 2.0) } else { 0.0 };
                let first = if n > 2 { 0.3 } else { 0.4 };
                (0..n)
                    .map(|i| {
                        if i == emitted {
                            0.6
                        } else if i == self.primary() {
                            first
                        } else {
                            rest
                        }
                    })
                    .collect()
            }
        }
    }

    /// Prompt header line identifying this profile.
    pub fn header(&self) -> String {
        format!(
            "{HEADER_OPEN}archetype={} seed={} length={} options={}{HEADER_CLOSE}",
            self.archetype, self.seed, self.length, self.option_count
        )
    }

    /// Parses a header at the start of `prompt`, returning the profile and
    /// the byte offset where generated text begins.
    pub fn parse_header(prompt: &str) -> Result<(Self, usize), SyntheticError> {
        let rest = prompt
            .strip_prefix(HEADER_OPEN)
            .ok_or_else(|| SyntheticError::BadHeader("missing <<synthetic prefix".into()))?;
        let close = rest
            .find(HEADER_CLOSE)
            .ok_or_else(|| SyntheticError::BadHeader("unterminated header".into()))?;
        let mut archetype = None;
        let mut seed = None;
        let mut length = None;
        let mut options = None;
        for field in rest[..close].split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| SyntheticError::BadHeader(field.to_string()))?;
            let bad = || SyntheticError::BadHeader(field.to_string());
            match key {
                "archetype" => archetype = Some(value.parse::<Archetype>().map_err(|_| bad())?),
                "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad())?),
                "length" => length = Some(value.parse::<usize>().map_err(|_| bad())?),
                "options" => options = Some(value.parse::<usize>().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        let missing = |k: &str| SyntheticError::BadHeader(format!("missing {k}"));
        let profile = SyntheticProfile::new(
            archetype.ok_or_else(|| missing("archetype"))?,
            length.ok_or_else(|| missing("length"))?,
            seed.ok_or_else(|| missing("seed"))?,
            options.ok_or_else(|| missing("options"))?,
        )?;
        Ok((profile, HEADER_OPEN.len() + close + HEADER_CLOSE.len()))
    }

    /// Generated response whose probe positions are exactly `1..=length`:
    /// filler words followed by `\boxed{<answer>}`.
    pub fn generated_text(&self) -> Result<String, SyntheticError> {
        if self.length < MIN_SAMPLE_LENGTH {
            return Err(SyntheticError::TooShort(MIN_SAMPLE_LENGTH));
        }
        let mut text = String::new();
        for i in 1..=self.length - 3 {
            text.push_str(&format!(" s{i}"));
        }
        text.push_str(" \\boxed{");
        text.push_str(&self.options()[self.emitted_answer()]);
        text.push('}');
        Ok(text)
    }

    /// Natural-log probability assigned to each generated token: the
    /// log of the leading option's probability at that step.
    pub fn token_logprobs(&self) -> Result<Vec<f64>, SyntheticError> {
        let tokens = SimpleTokenizer.tokenize(&self.generated_text()?);
        Ok((1..=tokens.len())
            .map(|i| {
                let t = i.min(self.length);
                let row = self.option_probs(t).expect("in range");
                row.iter().cloned().fold(0.0, f64::max).ln()
            })
            .collect())
    }
}

/// Next-token distribution at probe step `t` of `profile`.
pub fn synthetic_distribution(profile: &SyntheticProfile, t: usize, vocab_size: usize) -> Result<TokenDistribution, SyntheticError> {
    let probs = profile.option_probs(t)?;
    let entries = profile
        .options()
        .into_iter()
        .zip(probs)
        .filter(|(_, p)| *p > 0.0)
        .map(|(token, prob)| TokenProb { token, prob })
        .collect();
    Ok(TokenDistribution::new(entries, vocab_size).expect("synthetic rows are valid distributions"))
}

/// Backend answering completion requests for prompts that start with a
/// synthetic profile header.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    pub vocab_size: usize,
}

impl SyntheticBackend {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size }
    }

    fn top_map(&self, profile: &SyntheticProfile, t: usize, k: usize) -> Result<BTreeMap<String, f64>, FetchError> {
        let dist = synthetic_distribution(profile, t, self.vocab_size).map_err(|e| FetchError::Transport(e.to_string()))?;
        Ok(dist
            .entries()
            .iter()
            .take(k)
            .map(|e| (e.token.clone(), e.prob.ln()))
            .collect())
    }

    fn probe(&self, profile: &SyntheticProfile, generated: &str, k: usize) -> Result<CompletionResponse, FetchError> {
        let cut = generated
            .rfind(BOXED_SUFFIX)
            .ok_or_else(|| FetchError::HttpStatus(400))?;
        if cut + BOXED_SUFFIX.len() != generated.len() {
            // multi-token answer prefixes are not modelled
            return Err(FetchError::HttpStatus(400));
        }
        let t = SimpleTokenizer.tokenize(&generated[..cut]).len();
        let top = self.top_map(profile, t, k).map_err(|_| FetchError::HttpStatus(400))?;
        let (best, lp) = top
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(tok, lp)| (tok.clone(), *lp))
            .unwrap_or_default();
        Ok(CompletionResponse {
            choices: vec![Choice {
                text: best.clone(),
                logprobs: Some(Logprobs {
                    tokens: vec![best],
                    token_logprobs: vec![Some(lp)],
                    top_logprobs: vec![Some(top)],
                    text_offset: vec![0],
                }),
            }],
        })
    }

    fn echo(&self, profile: &SyntheticProfile, prompt: &str, gen_start: usize, k: usize) -> Result<CompletionResponse, FetchError> {
        let pieces = SimpleTokenizer.tokenize(prompt);
        let mut lp = Logprobs::default();
        let mut offset = 0;
        let mut generated_index = 0usize;
        for piece in pieces {
            lp.text_offset.push(offset);
            if offset + piece.len() > gen_start {
                generated_index += 1;
                let t = (generated_index - 1).clamp(1, profile.length);
                let top = self.top_map(profile, t, k)?;
                let best = top.values().cloned().fold(f64::NEG_INFINITY, f64::max);
                lp.token_logprobs.push(Some(best));
                lp.top_logprobs.push(Some(top));
            } else if lp.tokens.is_empty() {
                lp.token_logprobs.push(None);
                lp.top_logprobs.push(None);
            } else {
                lp.token_logprobs.push(Some(-1.0));
                lp.top_logprobs.push(Some(BTreeMap::from([(piece.clone(), -1.0)])));
            }
            offset += piece.len();
            lp.tokens.push(piece);
        }
        // the one freshly generated token
        let t = generated_index.clamp(1, profile.length);
        let top = self.top_map(profile, t, k)?;
        let (best, best_lp) = top
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(tok, v)| (tok.clone(), *v))
            .unwrap_or_default();
        lp.text_offset.push(offset);
        lp.tokens.push(best.clone());
        lp.token_logprobs.push(Some(best_lp));
        lp.top_logprobs.push(Some(top));
        Ok(CompletionResponse {
            choices: vec![Choice {
                text: format!("{prompt}{best}"),
                logprobs: Some(lp),
            }],
        })
    }
}

impl Backend for SyntheticBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, FetchError> {
        let (profile, gen_start) =
            SyntheticProfile::parse_header(&request.prompt).map_err(|_| FetchError::HttpStatus(400))?;
        let k = request.logprobs as usize;
        if request.echo {
            self.echo(&profile, &request.prompt, gen_start, k)
        } else {
            self.probe(&profile, &request.prompt[gen_start..], k)
        }
    }
}
