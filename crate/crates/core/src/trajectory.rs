//! Option-preference curves over generation steps.
//!
//! Each probe position yields a probability per multiple-choice option. The
//! raw rows are noisy, so they are smoothed either as plain prefix sums or
//! with distance-decayed weights `(t - k + 1)^-alpha`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{TokenDistribution, MASS_TOLERANCE};

/// Decay coefficient used for exported curves unless configured otherwise.
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("option probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("row {row} sums to {sum}, which exceeds 1")]
    RowMassExceedsOne { row: usize, sum: f64 },
    #[error("row {row} has {got} values for {expected} options")]
    RaggedRow { row: usize, got: usize, expected: usize },
    #[error("decay coefficient {0} must be finite and non-negative")]
    InvalidAlpha(f64),
    #[error("answer entropy {0} must be finite and non-negative")]
    InvalidEntropy(f64),
    #[error("no options given")]
    NoOptions,
}

/// Per-step option probabilities for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionSeries {
    options: Vec<String>,
    probs: Vec<Vec<f64>>,
    alpha: f64,
}

impl OptionSeries {
    pub fn new(options: Vec<String>, probs: Vec<Vec<f64>>, alpha: f64) -> Result<Self, TrajectoryError> {
        if options.is_empty() {
            return Err(TrajectoryError::NoOptions);
        }
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(TrajectoryError::InvalidAlpha(alpha));
        }
        for (row, values) in probs.iter().enumerate() {
            if values.len() != options.len() {
                return Err(TrajectoryError::RaggedRow {
                    row,
                    got: values.len(),
                    expected: options.len(),
                });
            }
            if let Some(&bad) = values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(TrajectoryError::InvalidProbability(bad));
            }
            let sum: f64 = values.iter().sum();
            if sum > 1.0 + MASS_TOLERANCE {
                return Err(TrajectoryError::RowMassExceedsOne { row, sum });
            }
        }
        Ok(Self { options, probs, alpha })
    }

    /// Reads option probabilities out of probe distributions by exact token
    /// match (bare or with one leading space). Options absent from the top-K
    /// get probability 0. With `renormalize`, each non-empty row is scaled to
    /// sum to 1.
    pub fn from_distributions(
        options: Vec<String>,
        dists: &[TokenDistribution],
        alpha: f64,
        renormalize: bool,
    ) -> Result<Self, TrajectoryError> {
        let probs = dists
            .iter()
            .map(|d| {
                let mut row: Vec<f64> = options.iter().map(|o| d.mass_of(o).min(1.0)).collect();
                let sum: f64 = row.iter().sum();
                if renormalize && sum > 0.0 {
                    row.iter_mut().for_each(|p| *p /= sum);
                }
                row
            })
            .collect();
        Self::new(options, probs, alpha)
    }

    pub fn options(&self) -> &[String] {
        &self.options
    }

    pub fn raw(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn steps(&self) -> usize {
        self.probs.len()
    }
}

/// Prefix sums of each option's probability.
pub fn cumulative_option_probs(series: &OptionSeries) -> Vec<Vec<f64>> {
    let mut acc = vec![0.0; series.options.len()];
    series
        .probs
        .iter()
        .map(|row| {
            for (a, p) in acc.iter_mut().zip(row) {
                *a += p;
            }
            acc.clone()
        })
        .collect()
}

/// `sum_{k <= t} P_k / (t - k + 1)^alpha` per option. Reduces to
/// [`cumulative_option_probs`] at alpha = 0.
pub fn decayed_cumulative_option_probs(series: &OptionSeries) -> Vec<Vec<f64>> {
    if series.alpha == 0.0 {
        return cumulative_option_probs(series);
    }
    let n = series.probs.len();
    // weights[d] is the weight at distance d = t - k, computed in log space
    let weights: Vec<f64> = (0..n).map(|d| (-series.alpha * ((d + 1) as f64).ln()).exp()).collect();
    (0..n)
        .map(|t| {
            let mut row = vec![0.0; series.options.len()];
            for k in 0..=t {
                let w = weights[t - k];
                if w == 0.0 {
                    continue;
                }
                for (r, p) in row.iter_mut().zip(&series.probs[k]) {
                    *r += w * p;
                }
            }
            row
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyBucket {
    /// `[0, 0.5)`
    Low,
    /// `[0.5, 1.5]`
    Medium,
    /// `(1.5, inf)`
    High,
}

impl EntropyBucket {
    pub fn as_str(self) -> &'static str {
        match self {
            EntropyBucket::Low => "low",
            EntropyBucket::Medium => "medium",
            EntropyBucket::High => "high",
        }
    }

    /// Lower and upper bound in bits; which ends are closed follows the
    /// variant docs.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            EntropyBucket::Low => (0.0, 0.5),
            EntropyBucket::Medium => (0.5, 1.5),
            EntropyBucket::High => (1.5, f64::INFINITY),
        }
    }
}

impl fmt::Display for EntropyBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn bucket_by_answer_entropy(h: f64) -> Result<EntropyBucket, TrajectoryError> {
    if h.is_nan() || h < 0.0 {
        return Err(TrajectoryError::InvalidEntropy(h));
    }
    Ok(if h < 0.5 {
        EntropyBucket::Low
    } else if h <= 1.5 {
        EntropyBucket::Medium
    } else {
        EntropyBucket::High
    })
}

/// Name recorded next to crossing counts in exported metadata.
pub const CROSSING_METHOD: &str = "argmax_lead_changes";

/// Index of the largest value; the earliest index wins ties.
pub fn leader(row: &[f64]) -> Option<usize> {
    row.iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// Number of lead changes along the curves: steps whose strict leader
/// differs from the previous leader. A tie with the current leader keeps the
/// lead where it is.
pub fn crossing_count(curves: &[Vec<f64>]) -> usize {
    let mut current: Option<usize> = None;
    let mut changes = 0;
    for row in curves {
        let Some(top) = leader(row) else { continue };
        match current {
            None => current = Some(top),
            Some(prev) if prev != top && row[top] > row[prev] => {
                changes += 1;
                current = Some(top);
            }
            _ => {}
        }
    }
    changes
}
