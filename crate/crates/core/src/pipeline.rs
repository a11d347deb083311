//! File-level pipeline stages: synth, harvest, score, correlate, trajectory
//! and select. Each stage reads and writes the shared JSONL/JSON/CSV formats
//! and is deterministic for identical inputs.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::inference::synthetic::{Archetype, SyntheticProfile};
use crate::inference::{harvest_corpus, load_trace_records, Backend, BackendConfig, HarvestReport, HarvestTarget, TraceSet};
use crate::metrics::{answer_entropy, eas, mean_eas, perplexity, response_length, truncation_error_bound, ProbeMode, TokenLogprobSeries};
use crate::probe::{SimpleTokenizer, Tokenizer};
use crate::records::{read_jsonl, write_json, write_jsonl, CorpusRecord, JsonlAppender, RecordError};
use crate::selection::{compute_pass_rate, select, ScoreRecord, SelectionError, SelectionManifest, SelectionParams, Strategy};
use crate::stats::{linear_regression, pearson, percentile, zscore_normalize, PairedSeries};
use crate::trajectory::{
    bucket_by_answer_entropy, crossing_count, cumulative_option_probs, decayed_cumulative_option_probs, leader, OptionSeries,
    CROSSING_METHOD,
};
use crate::SCHEMA_VERSION;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("backend: {0}")]
    Backend(String),
    #[error("input: {0}")]
    Parse(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("missing strategy inputs: {0}")]
    MissingInputs(String),
    #[error("{0}")]
    Io(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl PipelineError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Io(_) => 1,
            PipelineError::Backend(_) => 2,
            PipelineError::Parse(_) | PipelineError::Config(_) => 3,
            PipelineError::InsufficientData(_) => 4,
            PipelineError::MissingInputs(_) => 5,
        }
    }
}

impl From<RecordError> for PipelineError {
    fn from(e: RecordError) -> Self {
        match e {
            RecordError::Io { .. } => PipelineError::Io(e.to_string()),
            RecordError::Parse { .. } => PipelineError::Parse(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: io::Error) -> PipelineError {
    if e.kind() == io::ErrorKind::InvalidData {
        PipelineError::Parse(e.to_string())
    } else {
        PipelineError::Io(format!("{}: {e}", path.display()))
    }
}

/// Reads a corpus file and rejects repeated sample ids.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>, PipelineError> {
    let records: Vec<CorpusRecord> = read_jsonl(path)?;
    index_unique(&records, |r| &r.sample_id, path)?;
    Ok(records)
}

fn index_unique<'a, T>(items: &'a [T], id: impl Fn(&T) -> &String, path: &Path) -> Result<HashMap<&'a str, &'a T>, PipelineError> {
    let mut map = HashMap::with_capacity(items.len());
    for item in items {
        if map.insert(id(item).as_str(), item).is_some() {
            return Err(PipelineError::Parse(format!(
                "{}: duplicate sample_id `{}`",
                path.display(),
                id(item)
            )));
        }
    }
    Ok(map)
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub out: PathBuf,
    pub samples_per_archetype: usize,
    pub seed: u64,
    pub min_length: usize,
    pub max_length: usize,
    pub option_count: usize,
    /// Monte Carlo answer draws per question.
    pub draws: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("corpus.jsonl"),
            samples_per_archetype: 20,
            seed: 0,
            min_length: 50,
            max_length: 70,
            option_count: 4,
            draws: 64,
        }
    }
}

/// Builds the corpus record of one synthetic sample, with `draws` answers
/// sampled from the profile's answer distribution.
pub fn synth_record(sample_id: String, profile: &SyntheticProfile, draws: usize, draw_seed: u64) -> Result<CorpusRecord, PipelineError> {
    let cfg = |e: crate::inference::synthetic::SyntheticError| PipelineError::Config(e.to_string());
    let options = profile.options();
    let text = profile.generated_text().map_err(cfg)?;
    let truth = options[profile.emitted_answer()].clone();
    let weights = WeightedIndex::new(profile.answer_distribution()).map_err(|e| PipelineError::Config(e.to_string()))?;
    let mut rng = ChaCha20Rng::seed_from_u64(draw_seed);
    let answers: Vec<String> = (0..draws).map(|_| options[weights.sample(&mut rng)].clone()).collect();
    let correct = answers.iter().map(|a| *a == truth).collect();
    let mut extra = serde_json::Map::new();
    extra.insert("archetype".into(), json!(profile.archetype));
    Ok(CorpusRecord {
        schema_version: SCHEMA_VERSION,
        sample_id,
        prompt: profile.header(),
        tokens: Some(SimpleTokenizer.tokenize(&text)),
        token_logprobs: Some(profile.token_logprobs().map_err(cfg)?),
        generated_text: text,
        answer_text: truth,
        options: Some(options),
        answers_per_round: Some(answers),
        correct_per_round: Some(correct),
        answer_span: None,
        extra,
    })
}

/// Writes `samples_per_archetype` samples of each behavioural archetype.
pub fn cmd_synth(config: &SynthConfig) -> Result<Vec<CorpusRecord>, PipelineError> {
    if config.min_length < crate::inference::synthetic::MIN_SAMPLE_LENGTH || config.min_length > config.max_length {
        return Err(PipelineError::Config(format!(
            "length range {}..={} is invalid",
            config.min_length, config.max_length
        )));
    }
    if config.draws == 0 {
        return Err(PipelineError::Config("draws must be at least 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut records = Vec::new();
    for archetype in Archetype::BEHAVIORAL {
        for i in 0..config.samples_per_archetype {
            let length = rng.random_range(config.min_length..=config.max_length);
            let profile_seed: u64 = rng.random();
            let draw_seed: u64 = rng.random();
            let profile = SyntheticProfile::new(archetype, length, profile_seed, config.option_count)
                .map_err(|e| PipelineError::Config(e.to_string()))?;
            records.push(synth_record(format!("{archetype}-{i:04}"), &profile, config.draws, draw_seed)?);
        }
    }
    write_jsonl(&config.out, &records)?;
    info!("wrote {} synthetic samples to {}", records.len(), config.out.display());
    Ok(records)
}

// -------------------------------------------------------------- harvest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestConfig {
    pub corpus: PathBuf,
    pub traces: PathBuf,
    pub mode: ProbeMode,
    pub stride: usize,
    pub backend: BackendConfig,
}

/// Probe targets for every corpus sample whose answer can be located.
/// Samples without one are returned separately.
pub fn harvest_targets(corpus: &[CorpusRecord]) -> (Vec<HarvestTarget>, Vec<(String, String)>) {
    let mut targets = Vec::with_capacity(corpus.len());
    let mut skipped = Vec::new();
    for rec in corpus {
        let span = rec.answer_span.map(|[a, b]| (a, b));
        match rec.generated_sample().with_located_answer(span) {
            Ok(sample) => targets.push(HarvestTarget {
                sample,
                answer_tokens: SimpleTokenizer.tokenize(&rec.answer_text),
                options: rec.options.clone(),
            }),
            Err(e) => skipped.push((rec.sample_id.clone(), e.to_string())),
        }
    }
    (targets, skipped)
}

/// Harvests every missing probe position of the corpus, appending records to
/// the trace file as they complete. Fails with a backend error when any
/// position could not be fetched; completed positions stay on disk.
pub fn cmd_harvest(config: &HarvestConfig, backend: &dyn Backend) -> Result<HarvestReport, PipelineError> {
    config.backend.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    if config.stride == 0 {
        return Err(PipelineError::Config("stride must be at least 1".into()));
    }
    let corpus = load_corpus(&config.corpus)?;
    let (targets, skipped) = harvest_targets(&corpus);
    for (id, why) in &skipped {
        warn!("skipping `{id}`: {why}");
    }
    let existing = load_trace_records(&config.traces).map_err(|e| io_error(&config.traces, e))?;
    let done = TraceSet::from_records(existing).done_keys();
    let mut out = JsonlAppender::open(&config.traces).map_err(|e| io_error(&config.traces, e))?;
    let report = harvest_corpus(backend, &config.backend, &targets, config.mode, config.stride, &done, &mut |r| out.append(r))
        .map_err(|e| io_error(&config.traces, e))?;
    info!(
        "harvest: {} jobs, {} records written, {} already done, {} failures",
        report.jobs,
        report.records_written,
        report.already_done,
        report.failures.len()
    );
    if !report.failures.is_empty() {
        return Err(PipelineError::Backend(format!(
            "{} probe requests failed (first: {}); rerun to resume",
            report.failures.len(),
            report.failures[0]
        )));
    }
    Ok(report)
}

// ---------------------------------------------------------------- score

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub traces: PathBuf,
    pub corpus: Option<PathBuf>,
    pub scores: PathBuf,
    /// Truncation summary JSON; skipped when `None`.
    pub summary: Option<PathBuf>,
    pub mode: ProbeMode,
    pub top_k: usize,
    pub vocab_size: usize,
    pub rounds: u32,
}

/// One row of the truncation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationRow {
    pub statistic: String,
    pub epsilon: f64,
    pub captured_mass: f64,
    pub bound_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationSummary {
    pub schema_version: u32,
    pub vocab_size: usize,
    pub top_k: usize,
    pub positions: usize,
    pub rows: Vec<TruncationRow>,
}

/// Mean and 90th/95th/99th percentile of the per-position residual mass,
/// each with its entropy error bound.
pub fn truncation_summary(epsilons: &[f64], vocab_size: usize, top_k: usize) -> Result<TruncationSummary, PipelineError> {
    let mut rows = Vec::new();
    if !epsilons.is_empty() {
        let mean = epsilons.iter().sum::<f64>() / epsilons.len() as f64;
        let stats = [
            ("mean", mean),
            ("p90", percentile(epsilons, 0.90).unwrap_or(0.0)),
            ("p95", percentile(epsilons, 0.95).unwrap_or(0.0)),
            ("p99", percentile(epsilons, 0.99).unwrap_or(0.0)),
        ];
        for (name, eps) in stats {
            let eps = eps.clamp(0.0, 1.0);
            rows.push(TruncationRow {
                statistic: name.to_string(),
                epsilon: eps,
                captured_mass: 1.0 - eps,
                bound_bits: truncation_error_bound(eps, vocab_size, top_k).map_err(|e| PipelineError::Config(e.to_string()))?,
            });
        }
    }
    Ok(TruncationSummary {
        schema_version: SCHEMA_VERSION,
        vocab_size,
        top_k,
        positions: epsilons.len(),
        rows,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScoreReport {
    pub scored: usize,
    pub incomplete: usize,
    pub duplicate_records: usize,
}

fn corpus_scores(rec: &CorpusRecord, out: &mut ScoreRecord, rounds: u32) {
    if let Some(lps) = &rec.token_logprobs {
        match TokenLogprobSeries::new(rec.sample_id.clone(), lps.clone()) {
            Ok(series) => {
                out.ppl = Some(perplexity(&series));
                out.token_length = Some(response_length(&series) as u64);
            }
            Err(e) => warn!("`{}`: token_logprobs ignored: {e}", rec.sample_id),
        }
    }
    if let Some(flags) = &rec.correct_per_round {
        if flags.len() >= rounds as usize {
            out.pass_rate = compute_pass_rate(&flags[..rounds as usize], rounds).ok();
        }
    }
}

/// Scores every sample with a complete trace. A missing or empty trace file
/// yields an empty score file and a warning.
pub fn cmd_score(config: &ScoreConfig) -> Result<(Vec<ScoreRecord>, ScoreReport), PipelineError> {
    if config.rounds == 0 {
        return Err(PipelineError::Config("rounds must be at least 1".into()));
    }
    let records = load_trace_records(&config.traces).map_err(|e| io_error(&config.traces, e))?;
    if records.is_empty() {
        warn!("{}: no trace records; writing empty scores", config.traces.display());
    }
    let set = TraceSet::from_records(records);
    let corpus = match &config.corpus {
        Some(p) => load_corpus(p)?,
        None => Vec::new(),
    };
    let corpus_path = config.corpus.clone().unwrap_or_default();
    let by_id = index_unique(&corpus, |r| &r.sample_id, &corpus_path)?;

    let ids: Vec<&str> = set.sample_ids().collect();
    let results: Vec<Option<(ScoreRecord, Vec<f64>)>> = ids
        .par_iter()
        .map(|id| {
            let assembled = set.assemble(id, config.mode, config.top_k, config.vocab_size).ok().flatten()?;
            let trace = &assembled.trace;
            let mut rec = ScoreRecord::new(*id);
            rec.eas = Some(eas(trace));
            rec.mean_eas = mean_eas(trace).ok();
            rec.extra.insert("probe_mode".into(), json!(trace.probe_mode));
            rec.extra.insert("stride".into(), json!(trace.stride));
            rec.extra.insert("positions".into(), json!(trace.position_count()));
            if let Some(c) = by_id.get(id) {
                corpus_scores(c, &mut rec, config.rounds);
            }
            let eps = set.records(id, config.mode).iter().map(|r| r.epsilon).collect();
            Some((rec, eps))
        })
        .collect();

    let mut scores = Vec::new();
    let mut epsilons = Vec::new();
    let mut report = ScoreReport {
        duplicate_records: set.duplicates(),
        ..Default::default()
    };
    for r in results {
        match r {
            Some((rec, eps)) => {
                scores.push(rec);
                epsilons.extend(eps);
            }
            None => report.incomplete += 1,
        }
    }
    report.scored = scores.len();
    if report.incomplete > 0 {
        warn!("skipped {} samples with incomplete traces", report.incomplete);
    }
    write_jsonl(&config.scores, &scores)?;
    if let Some(path) = &config.summary {
        write_json(path, &truncation_summary(&epsilons, config.vocab_size, config.top_k)?)?;
    }
    Ok((scores, report))
}

// ------------------------------------------------------------ correlate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelateConfig {
    pub scores: PathBuf,
    pub corpus: PathBuf,
    pub report: PathBuf,
    /// z-scored scatter table; skipped when `None`.
    pub scatter: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCorrelation {
    pub metric_name: String,
    pub r: f64,
    pub p: f64,
    /// Regression of z-scored answer entropy on the z-scored metric.
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub schema_version: u32,
    pub target: String,
    pub joined: usize,
    pub metrics: Vec<MetricCorrelation>,
}

pub const CORRELATED_METRICS: [&str; 4] = ["eas", "mean_eas", "ppl", "token_length"];

fn metric_value(rec: &ScoreRecord, name: &str) -> Option<f64> {
    match name {
        "eas" => rec.eas,
        "mean_eas" => rec.mean_eas,
        "ppl" => rec.ppl,
        "token_length" => rec.token_length.map(|v| v as f64),
        _ => None,
    }
}

/// Correlates each score metric with the Monte Carlo answer entropy of the
/// corpus, joined on `sample_id`.
pub fn cmd_correlate(config: &CorrelateConfig) -> Result<CorrelationReport, PipelineError> {
    let scores: Vec<ScoreRecord> = read_jsonl(&config.scores)?;
    let scores_by_id = index_unique(&scores, |r| &r.sample_id, &config.scores)?;
    let corpus = load_corpus(&config.corpus)?;

    let mut joined: Vec<(&ScoreRecord, f64)> = Vec::new();
    for rec in &corpus {
        let Some(score) = scores_by_id.get(rec.sample_id.as_str()) else { continue };
        match rec.answer_sample() {
            Some(Ok(sample)) => joined.push((score, answer_entropy(&sample))),
            Some(Err(e)) => return Err(PipelineError::Parse(format!("`{}`: {e}", rec.sample_id))),
            None => {}
        }
    }
    joined.sort_by(|a, b| a.0.sample_id.cmp(&b.0.sample_id));
    if joined.len() < 3 {
        return Err(PipelineError::InsufficientData(format!(
            "{} samples joined with answer entropy, need at least 3",
            joined.len()
        )));
    }

    let mut metrics = Vec::new();
    let mut scatter = Vec::new();
    for name in CORRELATED_METRICS {
        let rows: Vec<(&str, f64, f64)> = joined
            .iter()
            .filter_map(|(s, h)| metric_value(s, name).map(|x| (s.sample_id.as_str(), x, *h)))
            .collect();
        if rows.len() < 3 {
            continue;
        }
        let xs: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let (zx, zy) = match (zscore_normalize(&xs), zscore_normalize(&ys)) {
            (Ok(zx), Ok(zy)) => (zx, zy),
            (Err(e), _) | (_, Err(e)) => {
                warn!("{name}: {e}; skipped");
                continue;
            }
        };
        let stats = |e: crate::stats::StatsError| PipelineError::InsufficientData(format!("{name}: {e}"));
        let corr = pearson(&PairedSeries::new(xs.clone(), ys.clone()).map_err(stats)?).map_err(stats)?;
        let fit = linear_regression(&PairedSeries::new(zx.clone(), zy.clone()).map_err(stats)?).map_err(stats)?;
        metrics.push(MetricCorrelation {
            metric_name: name.to_string(),
            r: corr.r,
            p: corr.p,
            slope: fit.slope,
            intercept: fit.intercept,
            n: corr.n,
        });
        for (i, (id, x, y)) in rows.iter().enumerate() {
            scatter.push((name, id.to_string(), *x, *y, zx[i], zy[i]));
        }
    }

    if let Some(path) = &config.scatter {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| PipelineError::Io(e.to_string());
        w.write_record(["metric", "sample_id", "value", "answer_entropy", "z_value", "z_answer_entropy"])
            .map_err(csv_err)?;
        for (name, id, x, y, zx, zy) in &scatter {
            w.serialize((name, id, x, y, zx, zy)).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| PipelineError::Io(e.to_string()))?;
        crate::records::write_atomic(path, &bytes)?;
    }
    let report = CorrelationReport {
        schema_version: SCHEMA_VERSION,
        target: "answer_entropy".into(),
        joined: joined.len(),
        metrics,
    };
    write_json(&config.report, &report)?;
    Ok(report)
}

// ----------------------------------------------------------- trajectory

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub traces: PathBuf,
    pub corpus: PathBuf,
    /// Directory receiving one curve CSV per sample.
    pub out_dir: PathBuf,
    /// Per-sample summary JSONL.
    pub summary: PathBuf,
    pub mode: ProbeMode,
    pub alpha: f64,
    pub top_k: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub schema_version: u32,
    pub sample_id: String,
    pub steps: usize,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket: Option<String>,
    pub crossing_count: usize,
    pub crossing_method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_leader: Option<String>,
}

/// File name for a sample's curve table; anything outside `[A-Za-z0-9._-]`
/// becomes `_`.
pub fn curve_file_name(sample_id: &str) -> String {
    let safe: String = sample_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect();
    format!("{safe}.csv")
}

fn curve_csv(positions: &[usize], entropies: &[f64], series: &OptionSeries) -> Result<Vec<u8>, csv::Error> {
    let cum = cumulative_option_probs(series);
    let dec = decayed_cumulative_option_probs(series);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string(), "entropy".to_string()];
    for kind in ["raw", "cumulative", "decayed"] {
        header.extend(series.options().iter().map(|o| format!("{kind}_{o}")));
    }
    w.write_record(&header)?;
    for (i, t) in positions.iter().enumerate() {
        let mut row = vec![t.to_string(), entropies[i].to_string()];
        for m in [&series.raw()[i], &cum[i], &dec[i]] {
            row.extend(m.iter().map(f64::to_string));
        }
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

/// Exports raw, cumulative and decayed option curves with the entropy curve
/// for every sample that has option labels and a complete trace.
pub fn cmd_trajectory(config: &TrajectoryConfig) -> Result<Vec<TrajectorySummary>, PipelineError> {
    if !config.alpha.is_finite() || config.alpha < 0.0 {
        return Err(PipelineError::Config(format!("alpha must be >= 0, got {}", config.alpha)));
    }
    let corpus = load_corpus(&config.corpus)?;
    let records = load_trace_records(&config.traces).map_err(|e| io_error(&config.traces, e))?;
    let set = TraceSet::from_records(records);
    let mut ordered: Vec<&CorpusRecord> = corpus.iter().collect();
    ordered.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    fs::create_dir_all(&config.out_dir).map_err(|e| io_error(&config.out_dir, e))?;
    let mut summaries = Vec::new();
    let mut seen_files = BTreeMap::new();
    for rec in ordered {
        let Some(options) = &rec.options else {
            warn!("`{}`: no option labels; skipped", rec.sample_id);
            continue;
        };
        let assembled = match set.assemble(&rec.sample_id, config.mode, config.top_k, config.vocab_size) {
            Ok(Some(a)) => a,
            Ok(None) => {
                warn!("`{}`: trace missing or incomplete; skipped", rec.sample_id);
                continue;
            }
            Err(e) => return Err(PipelineError::Parse(format!("`{}`: {e}", rec.sample_id))),
        };
        let series = OptionSeries::from_distributions(options.clone(), &assembled.distributions, config.alpha, false)
            .map_err(|e| PipelineError::Parse(format!("`{}`: {e}", rec.sample_id)))?;
        let positions: Vec<usize> = set.records(&rec.sample_id, config.mode).iter().map(|r| r.t).collect();
        let name = curve_file_name(&rec.sample_id);
        if let Some(other) = seen_files.insert(name.clone(), rec.sample_id.clone()) {
            return Err(PipelineError::Parse(format!(
                "sample ids `{other}` and `{}` map to the same file {name}",
                rec.sample_id
            )));
        }
        let bytes = curve_csv(&positions, assembled.trace.entropies(), &series).map_err(|e| PipelineError::Io(e.to_string()))?;
        crate::records::write_atomic(&config.out_dir.join(&name), &bytes)?;

        let h = match rec.answer_sample() {
            Some(Ok(s)) => Some(answer_entropy(&s)),
            _ => None,
        };
        let decayed = decayed_cumulative_option_probs(&series);
        summaries.push(TrajectorySummary {
            schema_version: SCHEMA_VERSION,
            sample_id: rec.sample_id.clone(),
            steps: series.steps(),
            alpha: config.alpha,
            answer_entropy: h,
            bucket: h.and_then(|h| bucket_by_answer_entropy(h).ok()).map(|b| b.as_str().to_string()),
            crossing_count: crossing_count(&decayed),
            crossing_method: CROSSING_METHOD.to_string(),
            final_leader: decayed.last().and_then(|row| leader(row)).map(|i| options[i].clone()),
        });
    }
    write_jsonl(&config.summary, &summaries)?;
    Ok(summaries)
}

// --------------------------------------------------------------- select

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub scores: PathBuf,
    pub manifest: PathBuf,
    pub strategy: Strategy,
    pub params: SelectionParams,
}

pub fn cmd_select(config: &SelectConfig) -> Result<SelectionManifest, PipelineError> {
    let pool: Vec<ScoreRecord> = read_jsonl(&config.scores)?;
    let manifest = select(config.strategy, &pool, config.params.clone()).map_err(|e| match e {
        SelectionError::MissingInputs(_) => PipelineError::MissingInputs(e.to_string()),
        SelectionError::DuplicateId(_) => PipelineError::Parse(e.to_string()),
        _ => PipelineError::Config(e.to_string()),
    })?;
    write_json(&config.manifest, &manifest)?;
    Ok(manifest)
}

/// Summary line printed after selection.
pub fn manifest_summary(m: &SelectionManifest) -> Value {
    json!({
        "strategy": m.strategy,
        "budget": m.budget,
        "selected": m.selected_ids.len(),
        "fill_rate": m.fill_rate(),
        "short": m.short,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{RetryPolicy, SyntheticBackend};
    use crate::metrics::canonicalize_answer;

    fn synth(dir: &Path, n: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            out: dir.join("corpus.jsonl"),
            samples_per_archetype: n,
            seed,
            ..SynthConfig::default()
        }
    }

    fn backend_config() -> BackendConfig {
        BackendConfig {
            vocab_size: 151_665,
            retry: RetryPolicy {
                max_attempts: 2,
                backoff_base_secs: 0.0,
            },
            ..BackendConfig::default()
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = cmd_synth(&synth(dir.path(), 20, 7)).unwrap();
        let bytes = fs::read(dir.path().join("corpus.jsonl")).unwrap();
        let b = cmd_synth(&synth(dir.path(), 20, 7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(bytes, fs::read(dir.path().join("corpus.jsonl")).unwrap());
        assert_eq!(a.len(), 60);
    }

    #[test]
    fn monte_carlo_answer_entropy_ranges() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = cmd_synth(&synth(dir.path(), 10, 3)).unwrap();
        for rec in &corpus {
            let answers = rec.answers_per_round.as_ref().unwrap();
            // recount independently of AnswerSample
            let mut counts: BTreeMap<String, f64> = BTreeMap::new();
            for a in answers {
                *counts.entry(canonicalize_answer(a)).or_default() += 1.0;
            }
            let n = answers.len() as f64;
            let h: f64 = counts.values().map(|c| -(c / n) * (c / n).log2()).sum();
            let mine = answer_entropy(&rec.answer_sample().unwrap().unwrap());
            assert!((h - mine).abs() < 1e-12);
            match rec.extra["archetype"].as_str().unwrap() {
                "persistent_tie" => assert!((1.8..=2.0).contains(&h), "{h}"),
                "early_lockin" => assert!(h < 0.3, "{h}"),
                _ => {}
            }
        }
    }

    #[test]
    fn pipeline_round_trip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        cmd_synth(&SynthConfig {
            min_length: 8,
            max_length: 12,
            ..synth(d, 2, 1)
        })
        .unwrap();
        let hc = HarvestConfig {
            corpus: d.join("corpus.jsonl"),
            traces: d.join("traces.jsonl"),
            mode: ProbeMode::ExactSuffix,
            stride: 1,
            backend: backend_config(),
        };
        let backend = SyntheticBackend::new(151_665);
        let first = cmd_harvest(&hc, &backend).unwrap();
        assert!(first.records_written > 0);
        let again = cmd_harvest(&hc, &backend).unwrap();
        assert_eq!(again.records_written, 0);
        assert_eq!(again.already_done, first.records_written);

        let sc = ScoreConfig {
            traces: hc.traces.clone(),
            corpus: Some(hc.corpus.clone()),
            scores: d.join("scores.jsonl"),
            summary: Some(d.join("summary.json")),
            mode: ProbeMode::ExactSuffix,
            top_k: 20,
            vocab_size: 151_665,
            rounds: 4,
        };
        let (scores, report) = cmd_score(&sc).unwrap();
        assert_eq!(report.scored, 6);
        assert!(scores.iter().all(|s| s.eas.is_some() && s.ppl.is_some() && s.pass_rate.is_some()));
        let ids: Vec<&str> = scores.iter().map(|s| s.sample_id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);

        let tc = TrajectoryConfig {
            traces: hc.traces.clone(),
            corpus: hc.corpus.clone(),
            out_dir: d.join("curves"),
            summary: d.join("trajectory.jsonl"),
            mode: ProbeMode::ExactSuffix,
            alpha: 0.5,
            top_k: 20,
            vocab_size: 151_665,
        };
        let summaries = cmd_trajectory(&tc).unwrap();
        assert_eq!(summaries.len(), 6);
        let csv = fs::read_to_string(d.join("curves").join(curve_file_name(&summaries[0].sample_id))).unwrap();
        assert!(csv.starts_with("t,entropy,raw_A,raw_B,raw_C,raw_D,cumulative_A"));
    }

    #[test]
    fn empty_traces_score_to_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let sc = ScoreConfig {
            traces: dir.path().join("missing.jsonl"),
            corpus: None,
            scores: dir.path().join("scores.jsonl"),
            summary: Some(dir.path().join("summary.json")),
            mode: ProbeMode::ExactSuffix,
            top_k: 20,
            vocab_size: 151_665,
            rounds: 4,
        };
        let (scores, report) = cmd_score(&sc).unwrap();
        assert!(scores.is_empty());
        assert_eq!(report, ScoreReport::default());
        assert_eq!(fs::read_to_string(&sc.scores).unwrap(), "");
    }

    #[test]
    fn truncation_summary_applies_bound_to_quantiles() {
        let eps: Vec<f64> = (0..=100).map(|i| i as f64 * 1e-4).collect();
        let s = truncation_summary(&eps, 151_665, 20).unwrap();
        let p90 = &s.rows[1];
        assert!((p90.epsilon - 0.009).abs() < 1e-15);
        let oracle = 0.009 * ((151_665.0 - 20.0) / 0.009f64).log2();
        assert!((p90.bound_bits - oracle).abs() < 1e-15);
        assert_eq!(s.rows.iter().map(|r| r.statistic.as_str()).collect::<Vec<_>>(), ["mean", "p90", "p95", "p99"]);
    }

    #[test]
    fn correlate_needs_three_points() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let corpus = cmd_synth(&SynthConfig {
            min_length: 8,
            max_length: 8,
            ..synth(d, 1, 1)
        })
        .unwrap();
        let mut s = ScoreRecord::new(corpus[0].sample_id.clone());
        s.eas = Some(1.0);
        write_jsonl(&d.join("scores.jsonl"), &[s]).unwrap();
        let cfg = CorrelateConfig {
            scores: d.join("scores.jsonl"),
            corpus: d.join("corpus.jsonl"),
            report: d.join("report.json"),
            scatter: None,
        };
        let err = cmd_correlate(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn select_reports_missing_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let pool: Vec<ScoreRecord> = (0..5).map(|i| ScoreRecord::new(format!("s{i}"))).collect();
        write_jsonl(&dir.path().join("scores.jsonl"), &pool).unwrap();
        let cfg = SelectConfig {
            scores: dir.path().join("scores.jsonl"),
            manifest: dir.path().join("m.json"),
            strategy: Strategy::Eas,
            params: SelectionParams::new(2),
        };
        assert_eq!(cmd_select(&cfg).unwrap_err().exit_code(), 5);
        let ok = cmd_select(&SelectConfig {
            strategy: Strategy::Random,
            params: SelectionParams {
                seed: Some(1),
                ..SelectionParams::new(2)
            },
            ..cfg
        })
        .unwrap();
        assert_eq!(ok.selected_ids.len(), 2);
    }

    #[test]
    fn curve_names_are_sanitized() {
        assert_eq!(curve_file_name("a/b c.1"), "a_b_c.1.csv");
    }
}
