//! Entropy Area Score (EAS): token-level uncertainty for reasoning-model
//! outputs.
//!
//! The crate covers the whole path from a corpus of generated responses to a
//! training-data selection manifest:
//!
//! * [`probe`] builds `prefix + \boxed{` probe contexts and finds the answer.
//! * [`inference`] harvests top-K next-token distributions for those contexts.
//! * [`metrics`] turns them into entropies, EAS and the baseline metrics.
//! * [`trajectory`] smooths per-option probabilities into preference curves.
//! * [`stats`] correlates metrics against answer entropy.
//! * [`selection`] ranks samples for fine-tuning under a fixed budget.
//! * [`pipeline`] strings the stages together over JSONL files.

pub mod inference;
pub mod metrics;
pub mod pipeline;
pub mod probe;
pub mod records;
pub mod selection;
pub mod stats;
pub mod trajectory;

/// Version stamped on every record this crate writes.
pub const SCHEMA_VERSION: u32 = 1;

pub(crate) fn schema_version() -> u32 {
    SCHEMA_VERSION
}

pub use metrics::{
    answer_entropy, correctness_entropy, eas, mean_eas, perplexity, response_length, shannon_entropy,
    truncation_error_bound, AnswerSample, EntropyTrace, MetricError, ProbeMode, TokenDistribution, TokenLogprobSeries,
    TokenProb,
};
pub use selection::{PassRate, ScoreRecord, SelectionManifest, Strategy};
