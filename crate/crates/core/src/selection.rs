//! Training-data selection strategies over scored samples.
//!
//! Every strategy is deterministic given the pool, its parameters and (for
//! random sampling) the seed. Ties are broken by ascending `sample_id`.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::SCHEMA_VERSION;

/// Sample budget used when none is configured.
pub const DEFAULT_BUDGET: usize = 5_000;
/// Repeated-inference rounds behind pass rates when none is configured.
pub const DEFAULT_ROUNDS: u32 = 4;
/// Optional token-length cap applied before selection.
pub const DEFAULT_MAX_TOKENS: u64 = 20_480;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SelectionError {
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("rounds must be at least 1")]
    ZeroRounds,
    #[error("expected {expected} correctness flags, got {got}")]
    FlagCountMismatch { expected: usize, got: usize },
    #[error("pass rate {correct}/{rounds} is not a valid fraction")]
    InvalidPassRate { correct: u32, rounds: u32 },
    #[error("duplicate sample_id `{0}` in pool")]
    DuplicateId(String),
    #[error("no record carries `{0}`, which the strategy needs")]
    MissingInputs(&'static str),
}

/// Exact fraction of correct outputs over a fixed number of rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "PassRateRepr", into = "PassRateRepr")]
pub struct PassRate {
    correct: u32,
    rounds: u32,
}

#[derive(Serialize, Deserialize)]
struct PassRateRepr {
    correct: u32,
    rounds: u32,
}

impl TryFrom<PassRateRepr> for PassRate {
    type Error = SelectionError;

    fn try_from(r: PassRateRepr) -> Result<Self, Self::Error> {
        PassRate::new(r.correct, r.rounds)
    }
}

impl From<PassRate> for PassRateRepr {
    fn from(p: PassRate) -> Self {
        PassRateRepr {
            correct: p.correct,
            rounds: p.rounds,
        }
    }
}

impl PassRate {
    pub fn new(correct: u32, rounds: u32) -> Result<Self, SelectionError> {
        if rounds == 0 || correct > rounds {
            return Err(SelectionError::InvalidPassRate { correct, rounds });
        }
        Ok(Self { correct, rounds })
    }

    pub fn correct(self) -> u32 {
        self.correct
    }

    pub fn rounds(self) -> u32 {
        self.rounds
    }

    pub fn as_f64(self) -> f64 {
        self.correct as f64 / self.rounds as f64
    }

    /// True for all-wrong or all-right.
    pub fn is_extreme(self) -> bool {
        self.correct == 0 || self.correct == self.rounds
    }
}

impl PartialOrd for PassRate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PassRate {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.correct as u64 * other.rounds as u64).cmp(&(other.correct as u64 * self.rounds as u64))
    }
}

impl fmt::Display for PassRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.correct, self.rounds)
    }
}

/// Pass rate over the first `rounds` correctness flags.
pub fn compute_pass_rate(flags: &[bool], rounds: u32) -> Result<PassRate, SelectionError> {
    if rounds == 0 {
        return Err(SelectionError::ZeroRounds);
    }
    if flags.len() != rounds as usize {
        return Err(SelectionError::FlagCountMismatch {
            expected: rounds as usize,
            got: flags.len(),
        });
    }
    PassRate::new(flags.iter().filter(|&&c| c).count() as u32, rounds)
}

/// Per-sample metric bundle. Unknown fields survive a read/write cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    #[serde(default = "crate::schema_version")]
    pub schema_version: u32,
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eas: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_eas: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_length: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass_rate: Option<PassRate>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ScoreRecord {
    pub fn new(sample_id: impl Into<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            sample_id: sample_id.into(),
            eas: None,
            mean_eas: None,
            ppl: None,
            token_length: None,
            pass_rate: None,
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Length,
    PassRate,
    Eas,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Random, Strategy::Length, Strategy::PassRate, Strategy::Eas];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Length => "length",
            Strategy::PassRate => "pass_rate",
            Strategy::Eas => "eas",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Strategy::Random),
            "length" => Ok(Strategy::Length),
            "pass_rate" | "pass-rate" => Ok(Strategy::PassRate),
            "eas" => Ok(Strategy::Eas),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub sample_id: String,
    pub reason: String,
}

/// Strategy knobs recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub budget: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u64>,
}

impl SelectionParams {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            seed: None,
            rounds: None,
            max_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub schema_version: u32,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub budget: usize,
    pub selected_ids: Vec<String>,
    pub parameters: SelectionParams,
    pub pool_size: usize,
    pub eligible: usize,
    /// Set when fewer than `budget` records were eligible.
    pub short: bool,
    pub pool_sha256: String,
    pub excluded: Vec<Exclusion>,
}

impl SelectionManifest {
    pub fn fill_rate(&self) -> f64 {
        self.selected_ids.len() as f64 / self.budget as f64
    }
}

/// SHA-256 over the canonical JSON lines of the pool, in pool order.
pub fn pool_hash(pool: &[ScoreRecord]) -> String {
    let mut hasher = Sha256::new();
    for r in pool {
        let line = serde_json::to_vec(r).expect("score records serialize");
        hasher.update(&line);
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

fn check_pool(pool: &[ScoreRecord], budget: usize) -> Result<(), SelectionError> {
    if budget == 0 {
        return Err(SelectionError::ZeroBudget);
    }
    let mut seen = HashSet::with_capacity(pool.len());
    for r in pool {
        if !seen.insert(r.sample_id.as_str()) {
            return Err(SelectionError::DuplicateId(r.sample_id.clone()));
        }
    }
    Ok(())
}

fn manifest(
    strategy: Strategy,
    pool: &[ScoreRecord],
    params: SelectionParams,
    eligible: usize,
    selected_ids: Vec<String>,
    excluded: Vec<Exclusion>,
) -> SelectionManifest {
    SelectionManifest {
        schema_version: SCHEMA_VERSION,
        strategy,
        seed: params.seed,
        budget: params.budget,
        short: eligible < params.budget,
        selected_ids,
        pool_size: pool.len(),
        eligible,
        pool_sha256: pool_hash(pool),
        excluded,
        parameters: params,
    }
}

fn exclude(id: &str, reason: impl Into<String>) -> Exclusion {
    Exclusion {
        sample_id: id.to_string(),
        reason: reason.into(),
    }
}

/// Applies the optional length cap, returning survivors and exclusions.
fn length_prefilter<'a>(pool: &'a [ScoreRecord], max_tokens: Option<u64>, out: &mut Vec<Exclusion>) -> Vec<&'a ScoreRecord> {
    pool.iter()
        .filter(|r| match (max_tokens, r.token_length) {
            (Some(cap), Some(len)) if len > cap => {
                out.push(exclude(&r.sample_id, format!("token_length {len} exceeds cap {cap}")));
                false
            }
            _ => true,
        })
        .collect()
}

/// Uniform sample without replacement. The pool is put in `sample_id` order
/// first, then a partial Fisher-Yates shuffle driven by ChaCha20 draws the
/// selection; the manifest lists ids in draw order.
pub fn select_random(pool: &[ScoreRecord], params: SelectionParams) -> Result<SelectionManifest, SelectionError> {
    check_pool(pool, params.budget)?;
    let seed = params.seed.unwrap_or(0);
    let mut excluded = Vec::new();
    let mut ids: Vec<&str> = length_prefilter(pool, params.max_tokens, &mut excluded)
        .into_iter()
        .map(|r| r.sample_id.as_str())
        .collect();
    ids.sort_unstable();
    let eligible = ids.len();
    let take = params.budget.min(eligible);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in 0..take {
        let j = rng.random_range(i..eligible);
        ids.swap(i, j);
    }
    let selected = ids[..take].iter().map(|s| s.to_string()).collect();
    let params = SelectionParams {
        seed: Some(seed),
        ..params
    };
    Ok(manifest(Strategy::Random, pool, params, eligible, selected, excluded))
}

/// Longest samples first.
pub fn select_by_length(pool: &[ScoreRecord], params: SelectionParams) -> Result<SelectionManifest, SelectionError> {
    check_pool(pool, params.budget)?;
    if pool.iter().all(|r| r.token_length.is_none()) && !pool.is_empty() {
        return Err(SelectionError::MissingInputs("token_length"));
    }
    let mut excluded = Vec::new();
    let mut ranked: Vec<(&str, u64)> = length_prefilter(pool, params.max_tokens, &mut excluded)
        .into_iter()
        .filter_map(|r| match r.token_length {
            Some(len) => Some((r.sample_id.as_str(), len)),
            None => {
                excluded.push(exclude(&r.sample_id, "missing token_length"));
                None
            }
        })
        .collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let eligible = ranked.len();
    let selected = ranked.iter().take(params.budget).map(|(id, _)| id.to_string()).collect();
    Ok(manifest(Strategy::Length, pool, params, eligible, selected, excluded))
}

/// Drops all-wrong and all-right samples, then keeps the lowest remaining
/// pass rates.
pub fn select_by_pass_rate(pool: &[ScoreRecord], params: SelectionParams) -> Result<SelectionManifest, SelectionError> {
    check_pool(pool, params.budget)?;
    let rounds = params.rounds.unwrap_or(DEFAULT_ROUNDS);
    if rounds == 0 {
        return Err(SelectionError::ZeroRounds);
    }
    if pool.iter().all(|r| r.pass_rate.is_none()) && !pool.is_empty() {
        return Err(SelectionError::MissingInputs("pass_rate"));
    }
    let mut excluded = Vec::new();
    let mut ranked: Vec<(&str, PassRate)> = Vec::new();
    for r in length_prefilter(pool, params.max_tokens, &mut excluded) {
        match r.pass_rate {
            None => excluded.push(exclude(&r.sample_id, "missing pass_rate")),
            Some(p) if p.rounds() != rounds => {
                excluded.push(exclude(&r.sample_id, format!("pass_rate over {} rounds, expected {rounds}", p.rounds())))
            }
            Some(p) if p.is_extreme() => excluded.push(exclude(&r.sample_id, format!("pass_rate {p} is 0 or 1"))),
            Some(p) => ranked.push((r.sample_id.as_str(), p)),
        }
    }
    ranked.sort_unstable_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let eligible = ranked.len();
    let selected = ranked.iter().take(params.budget).map(|(id, _)| id.to_string()).collect();
    let params = SelectionParams {
        rounds: Some(rounds),
        ..params
    };
    Ok(manifest(Strategy::PassRate, pool, params, eligible, selected, excluded))
}

/// Highest EAS first.
pub fn select_by_eas(pool: &[ScoreRecord], params: SelectionParams) -> Result<SelectionManifest, SelectionError> {
    check_pool(pool, params.budget)?;
    if pool.iter().all(|r| r.eas.is_none()) && !pool.is_empty() {
        return Err(SelectionError::MissingInputs("eas"));
    }
    let mut excluded = Vec::new();
    let mut ranked: Vec<(&str, f64)> = length_prefilter(pool, params.max_tokens, &mut excluded)
        .into_iter()
        .filter_map(|r| match r.eas {
            Some(v) if v.is_finite() => Some((r.sample_id.as_str(), v)),
            Some(v) => {
                excluded.push(exclude(&r.sample_id, format!("non-finite eas {v}")));
                None
            }
            None => {
                excluded.push(exclude(&r.sample_id, "missing eas"));
                None
            }
        })
        .collect();
    ranked.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let eligible = ranked.len();
    let selected = ranked.iter().take(params.budget).map(|(id, _)| id.to_string()).collect();
    Ok(manifest(Strategy::Eas, pool, params, eligible, selected, excluded))
}

pub fn select(strategy: Strategy, pool: &[ScoreRecord], params: SelectionParams) -> Result<SelectionManifest, SelectionError> {
    match strategy {
        Strategy::Random => select_random(pool, params),
        Strategy::Length => select_by_length(pool, params),
        Strategy::PassRate => select_by_pass_rate(pool, params),
        Strategy::Eas => select_by_eas(pool, params),
    }
}
