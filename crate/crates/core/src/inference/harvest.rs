//! Bounded-concurrency harvesting of probe distributions into trace records.
//!
//! Requests run on `max_in_flight` worker threads, each holding at most one
//! request at a time. Results are handed to the sink in `(sample, position)`
//! job order as soon as every earlier job has finished, so an interrupted run
//! leaves a clean prefix on disk and a rerun only fetches what is missing.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::wire::CompletionRequest;
use super::{distribution_from_top, fetch_topk_distribution, Backend, BackendConfig, FetchError};
use crate::metrics::{shannon_entropy, EntropyTrace, MetricError, ProbeMode, TokenDistribution};
use crate::probe::{build_probe_context, enumerate_probe_positions, GeneratedSample};
use crate::trajectory::{OptionSeries, TrajectoryError};
use crate::SCHEMA_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

/// One harvested probe position, as stored in the trace JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(default = "crate::schema_version")]
    pub schema_version: u32,
    pub sample_id: String,
    pub t: usize,
    pub mode: ProbeMode,
    pub stride: usize,
    /// T for the sample, so completeness can be judged from the file alone.
    pub answer_end: usize,
    pub topk: Vec<TopLogprob>,
    pub epsilon: f64,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl TraceRecord {
    fn new(sample_id: &str, t: usize, mode: ProbeMode, stride: usize, answer_end: usize, dist: &TokenDistribution) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            sample_id: sample_id.to_string(),
            t,
            mode,
            stride,
            answer_end,
            topk: dist
                .entries()
                .iter()
                .map(|e| TopLogprob {
                    token: e.token.clone(),
                    logprob: e.prob.ln(),
                })
                .collect(),
            epsilon: dist.epsilon(),
            extra: Map::new(),
        }
    }

    pub fn key(&self) -> (String, usize, ProbeMode) {
        (self.sample_id.clone(), self.t, self.mode)
    }

    pub fn distribution(&self, vocab_size: usize) -> Result<TokenDistribution, MetricError> {
        TokenDistribution::from_logprobs(self.topk.iter().map(|e| (e.token.clone(), e.logprob)), vocab_size)
    }
}

/// A located sample plus what the probes need alongside it.
#[derive(Debug, Clone)]
pub struct HarvestTarget {
    pub sample: GeneratedSample,
    /// Tokens of the ground-truth answer; all but the last are appended after
    /// the `\boxed{` suffix.
    pub answer_tokens: Vec<String>,
    pub options: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionFailure {
    pub sample_id: String,
    /// `None` when a whole-sample request failed.
    pub position: Option<usize>,
    pub error: FetchError,
}

impl std::fmt::Display for PositionFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.position {
            Some(t) => write!(f, "sample `{}` position {t}: {}", self.sample_id, self.error),
            None => write!(f, "sample `{}`: {}", self.sample_id, self.error),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HarvestReport {
    pub jobs: usize,
    pub records_written: usize,
    pub already_done: usize,
    pub failures: Vec<PositionFailure>,
}

impl HarvestReport {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

enum Job<'a> {
    Position {
        target: &'a HarvestTarget,
        t: usize,
        context: String,
    },
    Sample {
        target: &'a HarvestTarget,
    },
}

type DoneSet = HashSet<(String, usize, ProbeMode)>;

fn plan_jobs<'a>(
    targets: &'a [HarvestTarget],
    mode: ProbeMode,
    stride: usize,
    done: &DoneSet,
    report: &mut HarvestReport,
    failures: &mut Vec<PositionFailure>,
) -> Vec<Job<'a>> {
    let mut ordered: Vec<&HarvestTarget> = targets.iter().collect();
    ordered.sort_by(|a, b| a.sample.sample_id.cmp(&b.sample.sample_id));
    let mut jobs = Vec::new();
    for target in ordered {
        let id = &target.sample.sample_id;
        let Some(answer_end) = target.sample.answer_end else {
            failures.push(PositionFailure {
                sample_id: id.clone(),
                position: None,
                error: FetchError::Transport("answer end not located".into()),
            });
            continue;
        };
        match mode {
            ProbeMode::ExactSuffix => {
                for t in enumerate_probe_positions(answer_end, stride) {
                    if done.contains(&(id.clone(), t, mode)) {
                        report.already_done += 1;
                        continue;
                    }
                    match build_probe_context(&target.sample, t, &target.answer_tokens) {
                        Ok(ctx) => jobs.push(Job::Position {
                            target,
                            t,
                            context: format!("{}{}", target.sample.prompt, ctx.render()),
                        }),
                        Err(e) => failures.push(PositionFailure {
                            sample_id: id.clone(),
                            position: Some(t),
                            error: FetchError::Transport(e.to_string()),
                        }),
                    }
                }
            }
            ProbeMode::FastPrompt => {
                let have = done.iter().filter(|(s, _, m)| s == id && *m == mode).count();
                // server-side T is unknown until the response arrives; a
                // sample with any records was written in one piece before
                if have > 0 {
                    report.already_done += have;
                    continue;
                }
                jobs.push(Job::Sample { target });
            }
        }
    }
    jobs
}

fn fast_prompt_records(
    backend: &dyn Backend,
    config: &BackendConfig,
    target: &HarvestTarget,
    stride: usize,
) -> Result<Vec<TraceRecord>, FetchError> {
    let sample = &target.sample;
    let answer_end = sample.answer_end.unwrap_or(0);
    let generated = sample.tokens()[..answer_end].concat();
    let prompt_len = sample.prompt.len();
    let request = CompletionRequest::echo_prompt(
        &config.model_name,
        format!("{}{}", sample.prompt, generated),
        config.top_k,
    );
    config.retry.run(|_| {
        let resp = backend.complete(&request)?;
        let lp = resp
            .choices
            .first()
            .and_then(|c| c.logprobs.as_ref())
            .ok_or_else(|| FetchError::MalformedResponse("response carries no logprobs".into()))?;
        let n = lp.tokens.len();
        if lp.top_logprobs.len() != n || lp.text_offset.len() != n {
            return Err(FetchError::MalformedResponse("logprob arrays differ in length".into()));
        }
        let gen_end = prompt_len + generated.len();
        // a token straddling the prompt boundary belongs to the generation
        let gen_idx: Vec<usize> = (0..n)
            .filter(|&i| {
                let end = lp.text_offset.get(i + 1).copied().unwrap_or(usize::MAX);
                end > prompt_len && lp.text_offset[i] < gen_end
            })
            .collect();
        let server_end = gen_idx.len();
        enumerate_probe_positions(server_end, stride)
            .into_iter()
            .map(|t| {
                let top = lp
                    .top_logprobs
                    .get(gen_idx[t - 1] + 1)
                    .and_then(|x| x.as_ref())
                    .ok_or_else(|| FetchError::MalformedResponse(format!("no top_logprobs after token {t}")))?;
                let dist = distribution_from_top(top, config.top_k, config.vocab_size)?;
                Ok(TraceRecord::new(&sample.sample_id, t, ProbeMode::FastPrompt, stride, server_end, &dist))
            })
            .collect()
    })
}

fn run_job(backend: &dyn Backend, config: &BackendConfig, job: &Job<'_>, stride: usize) -> Result<Vec<TraceRecord>, PositionFailure> {
    match job {
        Job::Position { target, t, context } => {
            let sample = &target.sample;
            fetch_topk_distribution(backend, config, context)
                .map(|dist| {
                    vec![TraceRecord::new(
                        &sample.sample_id,
                        *t,
                        ProbeMode::ExactSuffix,
                        stride,
                        sample.answer_end.unwrap_or(0),
                        &dist,
                    )]
                })
                .map_err(|error| PositionFailure {
                    sample_id: sample.sample_id.clone(),
                    position: Some(*t),
                    error,
                })
        }
        Job::Sample { target } => fast_prompt_records(backend, config, target, stride).map_err(|error| PositionFailure {
            sample_id: target.sample.sample_id.clone(),
            position: None,
            error,
        }),
    }
}

/// Harvests every missing `(sample, position, mode)` of `targets`, handing
/// records to `sink` in job order. Keys in `done` are skipped. Failed
/// positions are reported, not written; a rerun picks them up.
pub fn harvest_corpus(
    backend: &dyn Backend,
    config: &BackendConfig,
    targets: &[HarvestTarget],
    mode: ProbeMode,
    stride: usize,
    done: &DoneSet,
    sink: &mut dyn FnMut(&TraceRecord) -> io::Result<()>,
) -> io::Result<HarvestReport> {
    let stride = stride.max(1);
    let mut report = HarvestReport::default();
    let mut failures = Vec::new();
    let jobs = plan_jobs(targets, mode, stride, done, &mut report, &mut failures);
    report.jobs = jobs.len();
    let workers = config.max_in_flight.max(1).min(jobs.len());
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let mut sink_error = None;

    thread::scope(|scope| {
        let (tx, rx) = mpsc::channel();
        for _ in 0..workers {
            let tx = tx.clone();
            let (jobs, next, abort) = (&jobs, &next, &abort);
            scope.spawn(move || loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let result = run_job(backend, config, job, stride);
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        let mut next_write = 0usize;
        for (i, result) in rx {
            pending.insert(i, result);
            while let Some(result) = pending.remove(&next_write) {
                next_write += 1;
                match result {
                    Ok(records) => {
                        if sink_error.is_some() {
                            continue;
                        }
                        for rec in records.iter().filter(|r| !done.contains(&r.key())) {
                            if let Err(e) = sink(rec) {
                                abort.store(true, Ordering::SeqCst);
                                sink_error = Some(e);
                                break;
                            }
                            report.records_written += 1;
                        }
                    }
                    Err(failure) => {
                        warn!("harvest failed: {failure}");
                        failures.push(failure);
                    }
                }
            }
        }
    });

    if let Some(e) = sink_error {
        return Err(e);
    }
    report.failures = failures;
    Ok(report)
}

/// Entropy trace and option curves harvested for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HarvestedTrace {
    pub trace: EntropyTrace,
    pub options: Option<OptionSeries>,
    pub records: Vec<TraceRecord>,
}

/// Harvests a single sample and assembles its trace.
pub fn harvest_trace(
    backend: &dyn Backend,
    config: &BackendConfig,
    target: &HarvestTarget,
    mode: ProbeMode,
    stride: usize,
    alpha: f64,
) -> Result<HarvestedTrace, PositionFailure> {
    let mut records = Vec::new();
    let report = harvest_corpus(
        backend,
        config,
        std::slice::from_ref(target),
        mode,
        stride,
        &HashSet::new(),
        &mut |r| {
            records.push(r.clone());
            Ok(())
        },
    )
    .expect("in-memory sink cannot fail");
    if let Some(f) = report.failures.into_iter().next() {
        return Err(f);
    }
    let mut set = TraceSet::default();
    for r in &records {
        set.insert(r.clone());
    }
    let fail = |error: String| PositionFailure {
        sample_id: target.sample.sample_id.clone(),
        position: None,
        error: FetchError::MalformedResponse(error),
    };
    let assembled = set
        .assemble(&target.sample.sample_id, mode, config.top_k, config.vocab_size)
        .map_err(|e| fail(e.to_string()))?
        .ok_or_else(|| fail("harvest left gaps".into()))?;
    let options = match &target.options {
        Some(opts) => Some(
            OptionSeries::from_distributions(opts.clone(), &assembled.distributions, alpha, false)
                .map_err(|e: TrajectoryError| fail(e.to_string()))?,
        ),
        None => None,
    };
    Ok(HarvestedTrace {
        trace: assembled.trace,
        options,
        records,
    })
}

/// Reads a trace JSONL file. A malformed final line (an interrupted write)
/// is dropped with a warning; malformed lines elsewhere are errors.
pub fn load_trace_records(path: &Path) -> io::Result<Vec<TraceRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<io::Result<_>>()?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceRecord>(line) {
            Ok(r) => out.push(r),
            Err(e) if Some(i) == last => warn!("{}: dropping truncated final line: {e}", path.display()),
            Err(e) => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), i + 1),
                ))
            }
        }
    }
    Ok(out)
}

/// Trace records grouped by sample and mode.
#[derive(Debug, Clone, Default)]
pub struct TraceSet {
    by_sample: BTreeMap<String, BTreeMap<ProbeMode, BTreeMap<usize, TraceRecord>>>,
    duplicates: usize,
}

pub struct AssembledTrace {
    pub trace: EntropyTrace,
    pub distributions: Vec<TokenDistribution>,
}

impl TraceSet {
    pub fn from_records(records: impl IntoIterator<Item = TraceRecord>) -> Self {
        let mut set = Self::default();
        for r in records {
            set.insert(r);
        }
        set
    }

    /// Later duplicates of a key are counted and ignored.
    pub fn insert(&mut self, record: TraceRecord) {
        let slot = self
            .by_sample
            .entry(record.sample_id.clone())
            .or_default()
            .entry(record.mode)
            .or_default();
        if slot.contains_key(&record.t) {
            self.duplicates += 1;
        } else {
            slot.insert(record.t, record);
        }
    }

    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = &str> {
        self.by_sample.keys().map(String::as_str)
    }

    pub fn modes(&self, sample_id: &str) -> Vec<ProbeMode> {
        self.by_sample
            .get(sample_id)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn records(&self, sample_id: &str, mode: ProbeMode) -> Vec<&TraceRecord> {
        self.by_sample
            .get(sample_id)
            .and_then(|m| m.get(&mode))
            .map(|r| r.values().collect())
            .unwrap_or_default()
    }

    pub fn done_keys(&self) -> DoneSet {
        self.by_sample
            .values()
            .flat_map(|m| m.values())
            .flat_map(|r| r.values())
            .map(TraceRecord::key)
            .collect()
    }

    /// Positions the sample's recorded T and stride call for that are not
    /// present.
    pub fn missing_positions(&self, sample_id: &str, mode: ProbeMode) -> Option<Vec<usize>> {
        let recs = self.by_sample.get(sample_id)?.get(&mode)?;
        let first = recs.values().next()?;
        Some(
            enumerate_probe_positions(first.answer_end, first.stride)
                .into_iter()
                .filter(|t| !recs.contains_key(t))
                .collect(),
        )
    }

    /// Builds the entropy trace, or `None` when positions are missing.
    pub fn assemble(
        &self,
        sample_id: &str,
        mode: ProbeMode,
        k_used: usize,
        vocab_size: usize,
    ) -> Result<Option<AssembledTrace>, MetricError> {
        let Some(recs) = self.by_sample.get(sample_id).and_then(|m| m.get(&mode)) else {
            return Ok(None);
        };
        let Some(first) = recs.values().next() else {
            return Ok(None);
        };
        let positions = enumerate_probe_positions(first.answer_end, first.stride);
        let mut distributions = Vec::with_capacity(positions.len());
        for t in &positions {
            match recs.get(t) {
                Some(r) => distributions.push(r.distribution(vocab_size)?),
                None => return Ok(None),
            }
        }
        let entropies = distributions.iter().map(shannon_entropy).collect();
        let trace = EntropyTrace::new(sample_id, entropies, mode, first.stride, k_used, Some(vocab_size))?;
        Ok(Some(AssembledTrace { trace, distributions }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::synthetic::{Archetype, SyntheticBackend, SyntheticProfile};
    use crate::inference::RetryPolicy;
    use crate::metrics::eas;
    use crate::probe::{SimpleTokenizer, Tokenizer};

    fn target(archetype: Archetype, length: usize, seed: u64) -> HarvestTarget {
        let p = SyntheticProfile::new(archetype, length, seed, 4).unwrap();
        let answer = p.options()[p.emitted_answer()].clone();
        let sample = GeneratedSample::from_text(
            format!("{archetype}-{seed}"),
            p.header(),
            &p.generated_text().unwrap(),
            answer.clone(),
            &SimpleTokenizer,
        )
        .with_located_answer(None)
        .unwrap();
        HarvestTarget {
            sample,
            answer_tokens: SimpleTokenizer.tokenize(&answer),
            options: Some(p.options()),
        }
    }

    fn config() -> BackendConfig {
        BackendConfig {
            max_in_flight: 4,
            vocab_size: 1000,
            retry: RetryPolicy {
                max_attempts: 2,
                backoff_base_secs: 0.0,
            },
            ..BackendConfig::default()
        }
    }

    #[test]
    fn exact_trace_has_one_entry_per_position() {
        let backend = SyntheticBackend::new(1000);
        let tgt = target(Archetype::EarlyLockin, 30, 1);
        let h = harvest_trace(&backend, &config(), &tgt, ProbeMode::ExactSuffix, 1, 0.5).unwrap();
        assert_eq!(h.trace.position_count(), 30);
        assert_eq!(h.options.as_ref().unwrap().steps(), 30);
        let again = harvest_trace(&backend, &config(), &tgt, ProbeMode::ExactSuffix, 1, 0.5).unwrap();
        assert_eq!(h, again);
    }

    #[test]
    fn strided_trace_probes_enumerated_positions() {
        let backend = SyntheticBackend::new(1000);
        let tgt = target(Archetype::MidReversal, 9, 2);
        assert_eq!(tgt.sample.answer_end, Some(10));
        let h = harvest_trace(&backend, &config(), &tgt, ProbeMode::ExactSuffix, 4, 0.5).unwrap();
        let ts: Vec<usize> = h.records.iter().map(|r| r.t).collect();
        assert_eq!(ts, vec![1, 5, 9]);
        assert_eq!(h.trace.stride, 4);
    }

    #[test]
    fn fast_mode_matches_exact_on_synthetic_backend() {
        let backend = SyntheticBackend::new(1000);
        let tgt = target(Archetype::PersistentTie, 25, 3);
        let exact = harvest_trace(&backend, &config(), &tgt, ProbeMode::ExactSuffix, 1, 0.5).unwrap();
        let fast = harvest_trace(&backend, &config(), &tgt, ProbeMode::FastPrompt, 1, 0.5).unwrap();
        assert_eq!(fast.trace.probe_mode, ProbeMode::FastPrompt);
        assert_eq!(fast.trace.position_count(), exact.trace.position_count());
        assert!((eas(&fast.trace) - eas(&exact.trace)).abs() < 1e-9);
    }

    #[test]
    fn failures_are_reported_with_position() {
        struct Down;
        impl Backend for Down {
            fn complete(&self, _: &CompletionRequest) -> Result<super::super::wire::CompletionResponse, FetchError> {
                Err(FetchError::HttpStatus(503))
            }
        }
        let tgt = target(Archetype::EarlyLockin, 5, 1);
        let err = harvest_trace(&Down, &config(), &tgt, ProbeMode::ExactSuffix, 1, 0.5).unwrap_err();
        assert_eq!(err.position, Some(1));
        assert_eq!(err.error, FetchError::HttpStatus(503));
    }

    #[test]
    fn done_keys_are_skipped() {
        let backend = SyntheticBackend::new(1000);
        let tgt = target(Archetype::EarlyLockin, 10, 1);
        let mut first = Vec::new();
        harvest_corpus(&backend, &config(), std::slice::from_ref(&tgt), ProbeMode::ExactSuffix, 1, &HashSet::new(), &mut |r| {
            first.push(r.clone());
            Ok(())
        })
        .unwrap();
        let set = TraceSet::from_records(first.iter().take(4).cloned());
        let mut rest = Vec::new();
        let report = harvest_corpus(&backend, &config(), &[tgt], ProbeMode::ExactSuffix, 1, &set.done_keys(), &mut |r| {
            rest.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(report.already_done, 4);
        assert_eq!(rest, first[4..].to_vec());
    }

    #[test]
    fn truncated_final_line_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let rec = r#"{"schema_version":1,"sample_id":"a","t":1,"mode":"exact_suffix","stride":1,"answer_end":2,"topk":[{"token":"A","logprob":0.0}],"epsilon":0.0}"#;
        std::fs::write(&path, format!("{rec}\n{}", &rec[..40])).unwrap();
        assert_eq!(load_trace_records(&path).unwrap().len(), 1);
        std::fs::write(&path, format!("{}\n{rec}\n", &rec[..40])).unwrap();
        assert!(load_trace_records(&path).is_err());
    }
}
