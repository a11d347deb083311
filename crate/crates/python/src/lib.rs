//! Python bindings for `eas_core`.

use std::collections::BTreeMap;
use std::fmt::Display;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use eas_core::inference::{self, Archetype, BackendConfig, HarvestTarget, RetryPolicy, SyntheticBackend};
use eas_core::metrics::{self, AnswerSample, EntropyTrace, ProbeMode, TokenLogprobSeries};
use eas_core::probe::{self, GeneratedSample, SimpleTokenizer, Tokenizer};
use eas_core::selection::{self, ScoreRecord, SelectionParams, Strategy};
use eas_core::{stats, trajectory};

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Top-K next-token distribution with its residual tail mass.
#[pyclass(module = "eas_py", frozen)]
struct TokenDistribution {
    inner: metrics::TokenDistribution,
}

#[pymethods]
impl TokenDistribution {
    #[new]
    #[pyo3(signature = (probs, vocab_size))]
    fn new(probs: BTreeMap<String, f64>, vocab_size: usize) -> PyResult<Self> {
        let entries = probs.into_iter().map(|(token, prob)| metrics::TokenProb { token, prob }).collect();
        Ok(Self {
            inner: metrics::TokenDistribution::new(entries, vocab_size).map_err(value_err)?,
        })
    }

    /// Builds a distribution from natural-log probabilities.
    #[staticmethod]
    fn from_logprobs(logprobs: BTreeMap<String, f64>, vocab_size: usize) -> PyResult<Self> {
        Ok(Self {
            inner: metrics::TokenDistribution::from_logprobs(logprobs, vocab_size).map_err(value_err)?,
        })
    }

    /// (token, probability) pairs, most probable first.
    fn entries(&self) -> Vec<(String, f64)> {
        self.inner.entries().iter().map(|e| (e.token.clone(), e.prob)).collect()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon()
    }

    fn entropy(&self) -> f64 {
        metrics::shannon_entropy(&self.inner)
    }

    fn truncation_bound(&self) -> PyResult<f64> {
        self.inner.truncation_bound().map_err(value_err)
    }

    fn __len__(&self) -> usize {
        self.inner.k()
    }

    fn __repr__(&self) -> String {
        format!(
            "TokenDistribution(k={}, vocab_size={}, epsilon={:.6})",
            self.inner.k(),
            self.inner.vocab_size(),
            self.inner.epsilon()
        )
    }
}

/// Generating profile of one synthetic sample.
#[pyclass(module = "eas_py", frozen)]
struct SyntheticProfile {
    inner: inference::SyntheticProfile,
}

#[pymethods]
impl SyntheticProfile {
    #[new]
    #[pyo3(signature = (archetype, length, seed, option_count = 4))]
    fn new(archetype: &str, length: usize, seed: u64, option_count: usize) -> PyResult<Self> {
        let archetype: Archetype = archetype.parse().map_err(value_err)?;
        Ok(Self {
            inner: inference::SyntheticProfile::new(archetype, length, seed, option_count).map_err(value_err)?,
        })
    }

    #[getter]
    fn archetype(&self) -> &'static str {
        self.inner.archetype.as_str()
    }

    #[getter]
    fn length(&self) -> usize {
        self.inner.length
    }

    fn options(&self) -> Vec<String> {
        self.inner.options()
    }

    fn option_probs(&self, t: usize) -> PyResult<Vec<f64>> {
        self.inner.option_probs(t).map_err(value_err)
    }

    fn distribution(&self, t: usize, vocab_size: usize) -> PyResult<TokenDistribution> {
        Ok(TokenDistribution {
            inner: inference::synthetic_distribution(&self.inner, t, vocab_size).map_err(value_err)?,
        })
    }

    fn generated_text(&self) -> PyResult<String> {
        self.inner.generated_text().map_err(value_err)
    }

    fn header(&self) -> String {
        self.inner.header()
    }

    fn answer_distribution(&self) -> Vec<f64> {
        self.inner.answer_distribution()
    }

    /// Harvests the entropy trace through the synthetic backend and returns
    /// `(entropies, option_rows)`.
    #[pyo3(signature = (mode = "exact_suffix", stride = 1, vocab_size = 151_665))]
    fn harvest(&self, mode: &str, stride: usize, vocab_size: usize) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let mode: ProbeMode = mode.parse().map_err(value_err)?;
        let answer = self.inner.options()[self.inner.emitted_answer()].clone();
        let sample = GeneratedSample::from_text(
            "synthetic",
            self.inner.header(),
            &self.generated_text()?,
            answer.clone(),
            &SimpleTokenizer,
        )
        .with_located_answer(None)
        .map_err(value_err)?;
        let target = HarvestTarget {
            sample,
            answer_tokens: SimpleTokenizer.tokenize(&answer),
            options: Some(self.inner.options()),
        };
        let config = BackendConfig {
            vocab_size,
            max_in_flight: 1,
            retry: RetryPolicy {
                max_attempts: 1,
                backoff_base_secs: 0.0,
            },
            ..BackendConfig::default()
        };
        let h = inference::harvest_trace(&SyntheticBackend::new(vocab_size), &config, &target, mode, stride, 0.0).map_err(value_err)?;
        let rows = h.options.map(|o| o.raw().to_vec()).unwrap_or_default();
        Ok((h.trace.entropies().to_vec(), rows))
    }

    fn __repr__(&self) -> String {
        format!(
            "SyntheticProfile(archetype={:?}, length={}, seed={}, option_count={})",
            self.inner.archetype.as_str(),
            self.inner.length,
            self.inner.seed,
            self.inner.option_count
        )
    }
}

/// Entropy in bits of a probability vector (may sum to less than one).
#[pyfunction]
fn entropy_bits(probs: Vec<f64>) -> PyResult<f64> {
    metrics::entropy_bits(&probs).map_err(value_err)
}

#[pyfunction]
fn truncation_error_bound(epsilon: f64, vocab_size: usize, k: usize) -> PyResult<f64> {
    metrics::truncation_error_bound(epsilon, vocab_size, k).map_err(value_err)
}

fn trace(entropies: Vec<f64>, stride: usize) -> PyResult<EntropyTrace> {
    EntropyTrace::new("py", entropies, ProbeMode::ExactSuffix, stride, 0, None).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (entropies, stride = 1))]
fn eas(entropies: Vec<f64>, stride: usize) -> PyResult<f64> {
    Ok(metrics::eas(&trace(entropies, stride)?))
}

#[pyfunction]
fn mean_eas(entropies: Vec<f64>) -> PyResult<f64> {
    metrics::mean_eas(&trace(entropies, 1)?).map_err(value_err)
}

/// Perplexity of natural-log token probabilities.
#[pyfunction]
fn perplexity(logprobs: Vec<f64>) -> PyResult<f64> {
    Ok(metrics::perplexity(&TokenLogprobSeries::new("py", logprobs).map_err(value_err)?))
}

/// Entropy in bits of the empirical distribution of canonicalized answers.
#[pyfunction]
fn answer_entropy(answers: Vec<String>) -> PyResult<f64> {
    let flags = vec![false; answers.len()];
    let sample = AnswerSample::canonicalized("py", &answers, flags).map_err(value_err)?;
    Ok(metrics::answer_entropy(&sample))
}

#[pyfunction]
fn correctness_entropy(n_correct: usize, n_total: usize) -> PyResult<f64> {
    metrics::correctness_entropy(n_correct, n_total).map_err(value_err)
}

#[pyfunction]
fn canonicalize_answer(raw: &str) -> String {
    metrics::canonicalize_answer(raw)
}

/// 1-based index T of the last answer token in `generated_text`.
#[pyfunction]
fn locate_answer_end(generated_text: &str) -> PyResult<usize> {
    let sample = GeneratedSample::from_text("py", "", generated_text, "", &SimpleTokenizer);
    probe::locate_answer_end(&sample, None).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (answer_end, stride = 1))]
fn enumerate_probe_positions(answer_end: usize, stride: usize) -> Vec<usize> {
    probe::enumerate_probe_positions(answer_end, stride)
}

#[pyfunction]
fn zscore_normalize(values: Vec<f64>) -> PyResult<Vec<f64>> {
    stats::zscore_normalize(&values).map_err(value_err)
}

/// Pearson `(r, p)` with the two-sided Student-t p-value.
#[pyfunction]
fn pearson(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<(f64, f64)> {
    let c = stats::pearson(&stats::PairedSeries::new(xs, ys).map_err(value_err)?).map_err(value_err)?;
    Ok((c.r, c.p))
}

/// Least-squares `(slope, intercept)` of y on x.
#[pyfunction]
fn linear_regression(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<(f64, f64)> {
    let fit = stats::linear_regression(&stats::PairedSeries::new(xs, ys).map_err(value_err)?).map_err(value_err)?;
    Ok((fit.slope, fit.intercept))
}

#[pyfunction]
fn student_t_cdf(t: f64, df: f64) -> f64 {
    stats::student_t_cdf(t, df)
}

fn series(rows: Vec<Vec<f64>>, alpha: f64) -> PyResult<trajectory::OptionSeries> {
    let n = rows.first().map_or(0, Vec::len);
    let options = (0..n).map(|i| i.to_string()).collect();
    trajectory::OptionSeries::new(options, rows, alpha).map_err(value_err)
}

#[pyfunction]
fn cumulative_option_probs(rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(trajectory::cumulative_option_probs(&series(rows, 0.0)?))
}

#[pyfunction]
#[pyo3(signature = (rows, alpha = trajectory::DEFAULT_ALPHA))]
fn decayed_cumulative_option_probs(rows: Vec<Vec<f64>>, alpha: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(trajectory::decayed_cumulative_option_probs(&series(rows, alpha)?))
}

#[pyfunction]
fn crossing_count(curves: Vec<Vec<f64>>) -> usize {
    trajectory::crossing_count(&curves)
}

#[pyfunction]
fn bucket_by_answer_entropy(h: f64) -> PyResult<&'static str> {
    Ok(trajectory::bucket_by_answer_entropy(h).map_err(value_err)?.as_str())
}

/// Runs a selection strategy over score records given as JSON lines and
/// returns the manifest as a JSON string.
#[pyfunction]
#[pyo3(signature = (strategy, scores_jsonl, budget, seed = None, rounds = None, max_tokens = None))]
fn select(strategy: &str, scores_jsonl: &str, budget: usize, seed: Option<u64>, rounds: Option<u32>, max_tokens: Option<u64>) -> PyResult<String> {
    let strategy: Strategy = strategy.parse().map_err(value_err)?;
    let pool = scores_jsonl
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<ScoreRecord>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    let params = SelectionParams {
        budget,
        seed,
        rounds,
        max_tokens,
    };
    let manifest = selection::select(strategy, &pool, params).map_err(value_err)?;
    serde_json::to_string(&manifest).map_err(value_err)
}

#[pymodule]
fn eas_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("DEFAULT_TOP_K", inference::DEFAULT_TOP_K)?;
    m.add("DEFAULT_VOCAB_SIZE", inference::DEFAULT_VOCAB_SIZE)?;
    m.add_class::<TokenDistribution>()?;
    m.add_class::<SyntheticProfile>()?;
    m.add_function(wrap_pyfunction!(entropy_bits, m)?)?;
    m.add_function(wrap_pyfunction!(truncation_error_bound, m)?)?;
    m.add_function(wrap_pyfunction!(eas, m)?)?;
    m.add_function(wrap_pyfunction!(mean_eas, m)?)?;
    m.add_function(wrap_pyfunction!(perplexity, m)?)?;
    m.add_function(wrap_pyfunction!(answer_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(correctness_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(canonicalize_answer, m)?)?;
    m.add_function(wrap_pyfunction!(locate_answer_end, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_probe_positions, m)?)?;
    m.add_function(wrap_pyfunction!(zscore_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(linear_regression, m)?)?;
    m.add_function(wrap_pyfunction!(student_t_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(cumulative_option_probs, m)?)?;
    m.add_function(wrap_pyfunction!(decayed_cumulative_option_probs, m)?)?;
    m.add_function(wrap_pyfunction!(crossing_count, m)?)?;
    m.add_function(wrap_pyfunction!(bucket_by_answer_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    Ok(())
}
