//! Uncertainty metrics over token distributions, entropy traces, logprob
//! series and repeated-answer samples.
//!
//! All entropies are in bits. Perplexity uses the natural exponential.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack allowed on probability sums before a distribution is rejected.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Smallest tail mass used inside the truncation bound once the caller has
/// asserted a non-zero tail.
pub const MIN_TAIL_MASS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("probabilities sum to {0}, which exceeds 1")]
    MassExceedsOne(f64),
    #[error("retained token count {k} must be below vocabulary size {vocab_size}")]
    KNotBelowVocab { k: usize, vocab_size: usize },
    #[error("tail mass {0} is outside [0, 1]")]
    InvalidEpsilon(f64),
    #[error("entropy {0} is negative or not finite")]
    InvalidEntropy(f64),
    #[error("entropy {entropy} exceeds log2 of vocabulary size {vocab_size}")]
    EntropyAboveMaximum { entropy: f64, vocab_size: usize },
    #[error("logprob {0} is positive or not finite")]
    InvalidLogprob(f64),
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("{n_correct} correct out of {n_total} total")]
    CountOutOfRange { n_correct: usize, n_total: usize },
    #[error("{answers} answers but {flags} correctness flags")]
    LengthMismatch { answers: usize, flags: usize },
}

/// One retained token of a top-K next-token distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token: String,
    pub prob: f64,
}

/// Top-K slice of a next-token distribution plus its residual tail mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    entries: Vec<TokenProb>,
    vocab_size: usize,
    epsilon: f64,
}

impl TokenDistribution {
    /// Validates the entries, sorts them by descending probability (stable on
    /// ties) and derives the tail mass.
    pub fn new(mut entries: Vec<TokenProb>, vocab_size: usize) -> Result<Self, MetricError> {
        let mut total = 0.0;
        for e in &entries {
            if !(0.0..=1.0).contains(&e.prob) {
                return Err(MetricError::InvalidProbability(e.prob));
            }
            total += e.prob;
        }
        if total > 1.0 + MASS_TOLERANCE {
            return Err(MetricError::MassExceedsOne(total));
        }
        if entries.len() > vocab_size {
            return Err(MetricError::KNotBelowVocab {
                k: entries.len(),
                vocab_size,
            });
        }
        entries.sort_by(|a, b| b.prob.total_cmp(&a.prob));
        Ok(Self {
            entries,
            vocab_size,
            epsilon: (1.0 - total).max(0.0),
        })
    }

    /// Builds a distribution from natural-log probabilities, as returned by
    /// completion endpoints.
    pub fn from_logprobs<I, S>(logprobs: I, vocab_size: usize) -> Result<Self, MetricError>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let entries = logprobs
            .into_iter()
            .map(|(token, lp)| {
                if lp.is_nan() || lp > 0.0 {
                    return Err(MetricError::InvalidLogprob(lp));
                }
                Ok(TokenProb {
                    token: token.into(),
                    prob: lp.exp(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(entries, vocab_size)
    }

    pub fn entries(&self) -> &[TokenProb] {
        &self.entries
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Summed probability of every retained entry whose text is exactly
    /// `token` or `token` with a single leading space.
    pub fn mass_of(&self, token: &str) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.token == token || e.token.strip_prefix(' ') == Some(token))
            .map(|e| e.prob)
            .sum()
    }

    /// Truncation error bound for this distribution's tail.
    pub fn truncation_bound(&self) -> Result<f64, MetricError> {
        truncation_error_bound(self.epsilon, self.vocab_size, self.k())
    }
}

/// Entropy in bits of the retained entries. The tail contributes nothing;
/// the error this introduces is bounded by [`truncation_error_bound`].
pub fn shannon_entropy(dist: &TokenDistribution) -> f64 {
    dist.entries.iter().map(|e| entropy_term(e.prob)).sum()
}

/// Entropy in bits of a raw probability slice (possibly a truncated one).
pub fn entropy_bits(probs: &[f64]) -> Result<f64, MetricError> {
    let mut total = 0.0;
    for &p in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(MetricError::InvalidProbability(p));
        }
        total += p;
    }
    if total > 1.0 + MASS_TOLERANCE {
        return Err(MetricError::MassExceedsOne(total));
    }
    Ok(probs.iter().map(|&p| entropy_term(p)).sum())
}

#[inline]
fn entropy_term(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.log2()
    } else {
        0.0
    }
}

/// Maximum entropy the tail mass `epsilon` can carry when spread uniformly
/// over the `vocab_size - k` tokens that were not retained:
/// `epsilon * log2((vocab_size - k) / epsilon)`.
pub fn truncation_error_bound(epsilon: f64, vocab_size: usize, k: usize) -> Result<f64, MetricError> {
    if k >= vocab_size {
        return Err(MetricError::KNotBelowVocab { k, vocab_size });
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(MetricError::InvalidEpsilon(epsilon));
    }
    if epsilon == 0.0 {
        return Ok(0.0);
    }
    let eps = epsilon.max(MIN_TAIL_MASS);
    Ok(eps * ((vocab_size - k) as f64 / eps).log2())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// One request per position with the answer suffix injected.
    ExactSuffix,
    /// One request per sample reading prompt logprobs of the raw sequence.
    /// Approximates the suffix probe.
    FastPrompt,
}

impl ProbeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeMode::ExactSuffix => "exact_suffix",
            ProbeMode::FastPrompt => "fast_prompt",
        }
    }
}

impl fmt::Display for ProbeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact_suffix" | "exact" => Ok(ProbeMode::ExactSuffix),
            "fast_prompt" | "fast" => Ok(ProbeMode::FastPrompt),
            other => Err(format!("unknown probe mode `{other}`")),
        }
    }
}

/// Per-position entropies H_1..H_{T-1} of one generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyTrace {
    pub sample_id: String,
    entropies: Vec<f64>,
    pub probe_mode: ProbeMode,
    pub stride: usize,
    pub k_used: usize,
    pub vocab_size: Option<usize>,
}

impl EntropyTrace {
    pub fn new(
        sample_id: impl Into<String>,
        entropies: Vec<f64>,
        probe_mode: ProbeMode,
        stride: usize,
        k_used: usize,
        vocab_size: Option<usize>,
    ) -> Result<Self, MetricError> {
        if stride == 0 {
            return Err(MetricError::ZeroStride);
        }
        let cap = vocab_size.map(|v| (v as f64).log2());
        for &h in &entropies {
            if !h.is_finite() || h < 0.0 {
                return Err(MetricError::InvalidEntropy(h));
            }
            if let (Some(cap), Some(v)) = (cap, vocab_size) {
                if h > cap + MASS_TOLERANCE {
                    return Err(MetricError::EntropyAboveMaximum {
                        entropy: h,
                        vocab_size: v,
                    });
                }
            }
        }
        Ok(Self {
            sample_id: sample_id.into(),
            entropies,
            probe_mode,
            stride,
            k_used,
            vocab_size,
        })
    }

    /// Convenience constructor for a stride-1 exact-suffix trace.
    pub fn from_entropies(sample_id: impl Into<String>, entropies: Vec<f64>) -> Result<Self, MetricError> {
        Self::new(sample_id, entropies, ProbeMode::ExactSuffix, 1, 0, None)
    }

    pub fn entropies(&self) -> &[f64] {
        &self.entropies
    }

    pub fn position_count(&self) -> usize {
        self.entropies.len()
    }
}

/// Entropy Area Score: the area under the entropy curve. For stride > 1 the
/// sampled entropies are scaled by the stride (rectangle rule).
pub fn eas(trace: &EntropyTrace) -> f64 {
    let area: f64 = trace.entropies.iter().sum();
    if trace.stride == 1 {
        area
    } else {
        area * trace.stride as f64
    }
}

/// Average entropy over the probed positions.
pub fn mean_eas(trace: &EntropyTrace) -> Result<f64, MetricError> {
    if trace.entropies.is_empty() {
        return Err(MetricError::Empty("entropy trace"));
    }
    let area: f64 = trace.entropies.iter().sum();
    Ok(area / trace.entropies.len() as f64)
}

/// Natural-log probabilities of every generated token of one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprobSeries {
    pub sample_id: String,
    logprobs: Vec<f64>,
}

impl TokenLogprobSeries {
    pub fn new(sample_id: impl Into<String>, logprobs: Vec<f64>) -> Result<Self, MetricError> {
        if logprobs.is_empty() {
            return Err(MetricError::Empty("logprob series"));
        }
        if let Some(&bad) = logprobs.iter().find(|lp| lp.is_nan() || **lp > 0.0) {
            return Err(MetricError::InvalidLogprob(bad));
        }
        Ok(Self {
            sample_id: sample_id.into(),
            logprobs,
        })
    }

    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }

    /// Appends `other` after `self`, keeping this series' id.
    pub fn concat(mut self, other: &TokenLogprobSeries) -> Self {
        self.logprobs.extend_from_slice(&other.logprobs);
        self
    }
}

pub fn perplexity(series: &TokenLogprobSeries) -> f64 {
    let total: f64 = series.logprobs.iter().sum();
    (-total / series.logprobs.len() as f64).exp()
}

pub fn response_length(series: &TokenLogprobSeries) -> usize {
    series.logprobs.len()
}

/// The N repeated-inference answers of one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSample {
    pub question_id: String,
    answers: Vec<String>,
    correct_flags: Vec<bool>,
}

impl AnswerSample {
    /// Answers are stored as given; use [`AnswerSample::canonicalized`] for
    /// raw model output.
    pub fn new(
        question_id: impl Into<String>,
        answers: Vec<String>,
        correct_flags: Vec<bool>,
    ) -> Result<Self, MetricError> {
        if answers.is_empty() {
            return Err(MetricError::Empty("answer sample"));
        }
        if answers.len() != correct_flags.len() {
            return Err(MetricError::LengthMismatch {
                answers: answers.len(),
                flags: correct_flags.len(),
            });
        }
        Ok(Self {
            question_id: question_id.into(),
            answers,
            correct_flags,
        })
    }

    pub fn canonicalized(
        question_id: impl Into<String>,
        raw_answers: &[String],
        correct_flags: Vec<bool>,
    ) -> Result<Self, MetricError> {
        let answers = raw_answers.iter().map(|a| canonicalize_answer(a)).collect();
        Self::new(question_id, answers, correct_flags)
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn correct_flags(&self) -> &[bool] {
        &self.correct_flags
    }

    pub fn n(&self) -> usize {
        self.answers.len()
    }

    pub fn n_correct(&self) -> usize {
        self.correct_flags.iter().filter(|&&c| c).count()
    }

    /// Count per unique answer.
    pub fn counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for a in &self.answers {
            *counts.entry(a.as_str()).or_insert(0) += 1;
        }
        counts
    }
}

/// Entropy in bits of the empirical distribution over unique answers.
pub fn answer_entropy(sample: &AnswerSample) -> f64 {
    let n = sample.n() as f64;
    sample
        .counts()
        .values()
        .map(|&c| entropy_term(c as f64 / n))
        .sum()
}

/// Binary entropy in bits of the fraction of correct answers.
pub fn correctness_entropy(n_correct: usize, n_total: usize) -> Result<f64, MetricError> {
    if n_total == 0 || n_correct > n_total {
        return Err(MetricError::CountOutOfRange { n_correct, n_total });
    }
    let p = n_correct as f64 / n_total as f64;
    let q = (n_total - n_correct) as f64 / n_total as f64;
    Ok(entropy_term(p) + entropy_term(q))
}

const BOXED_OPENER: &str = "\\boxed{";

/// Canonical form used to decide answer equality.
///
/// Whitespace is trimmed, a `\boxed{...}` wrapper or a dangling closing brace
/// left over from one is removed, and anything that parses as an exact
/// rational (`3`, `-0.50`, `6/4`) is rewritten in lowest terms. Everything else
/// is compared case-sensitively.
pub fn canonicalize_answer(raw: &str) -> String {
    let mut s = raw.trim();
    if let Some(inner) = s.strip_prefix(BOXED_OPENER) {
        s = inner.strip_suffix('}').unwrap_or(inner).trim();
    } else if s.ends_with('}') && s.matches('}').count() > s.matches('{').count() {
        s = s[..s.len() - 1].trim_end();
    }
    match parse_rational(s) {
        Some(r) => format_rational(&r),
        None => s.to_string(),
    }
}

fn parse_rational(s: &str) -> Option<BigRational> {
    if let Some((num, den)) = s.split_once('/') {
        let num = parse_decimal(num.trim())?;
        let den = parse_decimal(den.trim())?;
        if den.is_zero() {
            return None;
        }
        return Some(num / den);
    }
    parse_decimal(s)
}

fn parse_decimal(s: &str) -> Option<BigRational> {
    let (negative, digits) = match s.as_bytes().first()? {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    let (int_part, frac_part) = match digits.split_once('.') {
        Some((i, f)) => (i, f),
        None => (digits, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().chain(frac_part.bytes()).all(|b| b.is_ascii_digit()) {
        return None;
    }
    let all_digits = format!("{int_part}{frac_part}");
    let numer: BigInt = all_digits.parse().ok()?;
    let denom = num_traits::pow(BigInt::from(10u8), frac_part.len());
    let value = BigRational::new(numer, denom);
    Some(if negative { -value } else { value })
}

fn format_rational(r: &BigRational) -> String {
    if r.is_zero() {
        return "0".to_string();
    }
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        let sign = if r.is_negative() { "-" } else { "" };
        format!("{sign}{}/{}", r.numer().abs(), r.denom())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(probs: &[f64], vocab: usize) -> TokenDistribution {
        let entries = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| TokenProb {
                token: format!("t{i}"),
                prob: p,
            })
            .collect();
        TokenDistribution::new(entries, vocab).unwrap()
    }

    #[test]
    fn entropy_of_simple_distributions() {
        assert_eq!(shannon_entropy(&dist(&[0.5, 0.5], 10)), 1.0);
        assert_eq!(shannon_entropy(&dist(&[1.0], 10)), 0.0);
        // -0.9 log2 0.9 - 0.1 log2 0.1, evaluated at 30 digits:
        // 0.468995593589281168...
        let h = shannon_entropy(&dist(&[0.9, 0.1], 10));
        assert!((h - 0.468_995_593_589_281_2).abs() < 1e-12, "{h}");
    }

    #[test]
    fn distribution_rejects_bad_mass() {
        let e = |p: f64| TokenProb {
            token: "x".into(),
            prob: p,
        };
        assert_eq!(
            TokenDistribution::new(vec![e(-0.1)], 4),
            Err(MetricError::InvalidProbability(-0.1))
        );
        assert!(matches!(
            TokenDistribution::new(vec![e(0.7), e(0.7)], 4),
            Err(MetricError::MassExceedsOne(_))
        ));
        assert!(entropy_bits(&[0.6, 0.6]).is_err());
        assert!(entropy_bits(&[-0.2]).is_err());
    }

    #[test]
    fn distribution_sorts_and_tracks_tail() {
        let d = dist(&[0.1, 0.6, 0.2], 100);
        let probs: Vec<f64> = d.entries().iter().map(|e| e.prob).collect();
        assert_eq!(probs, vec![0.6, 0.2, 0.1]);
        assert!((d.epsilon() - 0.1).abs() < 1e-12);
        assert_eq!(d.k(), 3);
    }

    #[test]
    fn from_logprobs_exponentiates() {
        let d = TokenDistribution::from_logprobs([("A", 0.5f64.ln()), (" B", 0.25f64.ln())], 50).unwrap();
        assert!((d.entries()[0].prob - 0.5).abs() < 1e-15);
        assert!((d.epsilon() - 0.25).abs() < 1e-12);
        assert!((d.mass_of("B") - 0.25).abs() < 1e-12);
        assert!(TokenDistribution::from_logprobs([("A", 0.1)], 50).is_err());
    }

    #[test]
    fn bound_edge_cases() {
        assert_eq!(truncation_error_bound(0.0, 100, 20), Ok(0.0));
        assert!(truncation_error_bound(0.1, 20, 20).is_err());
        assert!(truncation_error_bound(1.5, 200, 20).is_err());
        // 0.0015 * log2(151645 / 0.0015)
        let b = truncation_error_bound(0.0015, 151_665, 20).unwrap();
        assert!((b - 0.039_886).abs() < 1e-5, "{b}");
    }

    #[test]
    fn eas_sums_and_scales_by_stride() {
        let t = EntropyTrace::from_entropies("s", vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(eas(&t), 3.0);
        assert_eq!(mean_eas(&t), Ok(1.0));
        let empty = EntropyTrace::from_entropies("s", vec![]).unwrap();
        assert_eq!(eas(&empty), 0.0);
        assert!(mean_eas(&empty).is_err());
        let t = EntropyTrace::from_entropies("s", vec![0.0, 2.0]).unwrap();
        assert_eq!(mean_eas(&t), Ok(1.0));
        let strided = EntropyTrace::new("s", vec![1.0, 0.5], ProbeMode::ExactSuffix, 4, 20, None).unwrap();
        assert_eq!(eas(&strided), 6.0);
    }

    #[test]
    fn trace_validates_entropies() {
        assert!(EntropyTrace::from_entropies("s", vec![-0.1]).is_err());
        assert!(EntropyTrace::from_entropies("s", vec![f64::NAN]).is_err());
        assert!(EntropyTrace::new("s", vec![2.5], ProbeMode::ExactSuffix, 1, 4, Some(4)).is_err());
        assert!(EntropyTrace::new("s", vec![2.0], ProbeMode::ExactSuffix, 1, 4, Some(4)).is_ok());
        assert!(EntropyTrace::new("s", vec![], ProbeMode::ExactSuffix, 0, 4, None).is_err());
    }

    #[test]
    fn perplexity_and_length() {
        let s = TokenLogprobSeries::new("s", vec![-1.0; 5]).unwrap();
        assert!((perplexity(&s) - std::f64::consts::E).abs() < 1e-12);
        let s = TokenLogprobSeries::new("s", vec![0.5f64.ln(); 7]).unwrap();
        assert!((perplexity(&s) - 2.0).abs() < 1e-12);
        assert_eq!(response_length(&TokenLogprobSeries::new("s", vec![-0.1]).unwrap()), 1);
        let long = TokenLogprobSeries::new("s", vec![-0.2; 6300]).unwrap();
        assert_eq!(response_length(&long), 6300);
        let joined = long.clone().concat(&s);
        assert_eq!(response_length(&joined), 6307);
        assert!(TokenLogprobSeries::new("s", vec![]).is_err());
        assert!(TokenLogprobSeries::new("s", vec![0.1]).is_err());
    }

    fn answers(counts: &[(&str, usize)]) -> AnswerSample {
        let list: Vec<String> = counts
            .iter()
            .flat_map(|(a, c)| std::iter::repeat(a.to_string()).take(*c))
            .collect();
        let n = list.len();
        AnswerSample::new("q", list, vec![false; n]).unwrap()
    }

    #[test]
    fn answer_entropy_examples() {
        assert_eq!(answer_entropy(&answers(&[("A", 64)])), 0.0);
        assert_eq!(answer_entropy(&answers(&[("A", 32), ("B", 32)])), 1.0);
        assert_eq!(answer_entropy(&answers(&[("A", 32), ("B", 16), ("C", 16)])), 1.5);
    }

    #[test]
    fn correctness_entropy_examples() {
        assert_eq!(correctness_entropy(32, 64), Ok(1.0));
        assert_eq!(correctness_entropy(0, 64), Ok(0.0));
        assert_eq!(correctness_entropy(64, 64), Ok(0.0));
        // H(0.25) = 2 - 0.75 log2 3
        let h = correctness_entropy(16, 64).unwrap();
        assert!((h - (2.0 - 0.75 * 3f64.log2())).abs() < 1e-15);
        assert!((h - 0.811_278).abs() < 1e-6);
        assert!(correctness_entropy(65, 64).is_err());
        assert!(correctness_entropy(0, 0).is_err());
    }

    #[test]
    fn answer_sample_shape_checks() {
        assert!(AnswerSample::new("q", vec![], vec![]).is_err());
        assert!(AnswerSample::new("q", vec!["a".into()], vec![true, false]).is_err());
    }

    #[test]
    fn canonical_answers() {
        assert_eq!(canonicalize_answer("  42 "), "42");
        assert_eq!(canonicalize_answer("42}"), "42");
        assert_eq!(canonicalize_answer("\\boxed{ 7 }"), "7");
        assert_eq!(canonicalize_answer("0.50"), "1/2");
        assert_eq!(canonicalize_answer("2/4"), "1/2");
        assert_eq!(canonicalize_answer("-3.0"), "-3");
        assert_eq!(canonicalize_answer("+6/3"), "2");
        assert_eq!(canonicalize_answer("-0"), "0");
        assert_eq!(canonicalize_answer("B"), "B");
        assert_ne!(canonicalize_answer("b"), canonicalize_answer("B"));
        assert_eq!(canonicalize_answer("\\frac{1}{2}"), "\\frac{1}{2}");
        assert_eq!(canonicalize_answer("1/0"), "1/0");
        let s = AnswerSample::canonicalized("q", &["1/2".into(), "0.5".into(), " 0.500}".into()], vec![true; 3]).unwrap();
        assert_eq!(answer_entropy(&s), 0.0);
    }

    proptest! {
        #[test]
        fn entropy_is_order_invariant(mut probs in prop::collection::vec(0.0f64..1.0, 1..20), seed in any::<u64>()) {
            let total: f64 = probs.iter().sum();
            for p in &mut probs { *p /= total.max(1.0); }
            let forward = entropy_bits(&probs).unwrap();
            let mut shuffled = probs.clone();
            // deterministic rotation + reversal
            shuffled.rotate_left((seed as usize) % probs.len());
            shuffled.reverse();
            let back = entropy_bits(&shuffled).unwrap();
            prop_assert!((forward - back).abs() <= 1e-12 * forward.max(1.0));
            prop_assert!((shannon_entropy(&dist(&probs, 1000)) - forward).abs() <= 1e-12 * forward.max(1.0));
        }

        #[test]
        fn correctness_entropy_is_symmetric(n_total in 1usize..500, frac in 0.0f64..=1.0) {
            let n = ((n_total as f64) * frac) as usize;
            prop_assert_eq!(correctness_entropy(n, n_total), correctness_entropy(n_total - n, n_total));
        }

        #[test]
        fn answer_entropy_permutation_invariant_and_bounded(labels in prop::collection::vec(0u8..6, 1..80), rot in 0usize..80) {
            let list: Vec<String> = labels.iter().map(|l| format!("ans{l}")).collect();
            let n = list.len();
            let a = AnswerSample::new("q", list.clone(), vec![false; n]).unwrap();
            let mut rotated = list;
            rotated.rotate_left(rot % n);
            let b = AnswerSample::new("q", rotated, vec![false; n]).unwrap();
            let ha = answer_entropy(&a);
            prop_assert!((ha - answer_entropy(&b)).abs() < 1e-12);
            let unique = a.counts().len() as f64;
            prop_assert!(ha <= unique.log2() + 1e-12);
        }

        #[test]
        fn bound_increases_with_tail_mass(vocab in 100usize..200_000, k in 1usize..64, u in 0.001f64..0.999) {
            prop_assume!(k < vocab);
            let peak = ((vocab - k) as f64 / std::f64::consts::E).min(1.0);
            let eps = u * peak;
            let h = 1e-7 * peak;
            prop_assume!(eps - h > 0.0);
            let lo = truncation_error_bound(eps - h, vocab, k).unwrap();
            let hi = truncation_error_bound(eps + h, vocab, k).unwrap();
            prop_assert!((hi - lo) / (2.0 * h) > 0.0);
        }
    }
}
