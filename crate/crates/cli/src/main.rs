use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

use eas_core::inference::{Backend, BackendConfig, HttpBackend, RetryPolicy, SyntheticBackend, DEFAULT_TOP_K, DEFAULT_VOCAB_SIZE};
use eas_core::pipeline::{
    cmd_correlate, cmd_harvest, cmd_score, cmd_select, cmd_synth, cmd_trajectory, manifest_summary, CorrelateConfig, HarvestConfig,
    PipelineError, ScoreConfig, SelectConfig, SynthConfig, TrajectoryConfig,
};
use eas_core::selection::{SelectionParams, DEFAULT_BUDGET, DEFAULT_MAX_TOKENS, DEFAULT_ROUNDS};
use eas_core::trajectory::DEFAULT_ALPHA;
use eas_core::{ProbeMode, Strategy};

#[derive(Parser)]
#[command(name = "eas", version, about = "Entropy Area Score pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus with Monte Carlo answer draws.
    Synth(SynthArgs),
    /// Harvest top-K probe distributions into a trace file (resumable).
    Harvest(HarvestArgs),
    /// Compute EAS and baseline metrics from complete traces.
    Score(ScoreArgs),
    /// Correlate score metrics with answer entropy.
    Correlate(CorrelateArgs),
    /// Export option-preference curves per sample.
    Trajectory(TrajectoryArgs),
    /// Select a training subset under a fixed budget.
    Select(SelectArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "corpus.jsonl")]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    samples_per_archetype: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    min_length: usize,
    #[arg(long, default_value_t = 70)]
    max_length: usize,
    #[arg(long, default_value_t = 4)]
    options: usize,
    #[arg(long, default_value_t = 64)]
    draws: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Http,
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    ExactSuffix,
    FastPrompt,
}

impl From<ModeArg> for ProbeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ExactSuffix => ProbeMode::ExactSuffix,
            ModeArg::FastPrompt => ProbeMode::FastPrompt,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Retained alternatives per probe.
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    /// Vocabulary size used for truncation bounds.
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    vocab_size: usize,
    #[arg(long, value_enum, default_value = "exact-suffix")]
    mode: ModeArg,
}

#[derive(Args)]
struct HarvestArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "http")]
    backend: BackendKind,
    #[arg(long, env = "EAS_ENDPOINT_URL", default_value = "http://localhost:8000/v1")]
    endpoint_url: String,
    #[arg(long, env = "EAS_API_KEY", hide_env_values = true)]
    api_key: Option<String>,
    #[arg(long, default_value = "default")]
    model_name: String,
    #[arg(long, default_value_t = 60.0)]
    timeout_secs: f64,
    #[arg(long, default_value_t = 8)]
    max_in_flight: usize,
    #[arg(long, default_value_t = 4)]
    max_attempts: u32,
    #[arg(long, default_value_t = 0.5)]
    backoff_base_secs: f64,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    traces: PathBuf,
    /// Corpus supplying token logprobs and per-round correctness.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    scores: PathBuf,
    /// Truncation summary JSON.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = DEFAULT_ROUNDS)]
    rounds: u32,
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// z-scored scatter CSV.
    #[arg(long)]
    scatter: Option<PathBuf>,
}

#[derive(Args)]
struct TrajectoryArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    summary: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    strategy: Strategy,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_ROUNDS)]
    rounds: u32,
    /// Drop samples longer than this many tokens; 0 disables the cap.
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    max_tokens: u64,
}

fn distinct(paths: &[&PathBuf]) -> Result<(), PipelineError> {
    for (i, a) in paths.iter().enumerate() {
        if paths[i + 1..].contains(a) {
            return Err(PipelineError::Config(format!("path {} is used twice", a.display())));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Synth(a) => {
            let records = cmd_synth(&SynthConfig {
                out: a.out,
                samples_per_archetype: a.samples_per_archetype,
                seed: a.seed,
                min_length: a.min_length,
                max_length: a.max_length,
                option_count: a.options,
                draws: a.draws,
            })?;
            println!("{} samples", records.len());
        }
        Command::Harvest(a) => {
            distinct(&[&a.corpus, &a.traces])?;
            let backend_config = BackendConfig {
                endpoint_url: a.endpoint_url,
                api_key: a.api_key,
                model_name: a.model_name,
                top_k: a.model.top_k,
                vocab_size: a.model.vocab_size,
                timeout_secs: a.timeout_secs,
                max_in_flight: a.max_in_flight,
                retry: RetryPolicy {
                    max_attempts: a.max_attempts,
                    backoff_base_secs: a.backoff_base_secs,
                },
            };
            backend_config.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
            let backend: Box<dyn Backend> = match a.backend {
                BackendKind::Http => Box::new(HttpBackend::new(&backend_config)),
                BackendKind::Synthetic => Box::new(SyntheticBackend::new(a.model.vocab_size)),
            };
            let report = cmd_harvest(
                &HarvestConfig {
                    corpus: a.corpus,
                    traces: a.traces,
                    mode: a.model.mode.into(),
                    stride: a.stride,
                    backend: backend_config,
                },
                backend.as_ref(),
            )?;
            println!(
                "{} records written, {} already present",
                report.records_written, report.already_done
            );
        }
        Command::Score(a) => {
            let mut paths = vec![&a.traces, &a.scores];
            paths.extend(a.corpus.as_ref());
            paths.extend(a.summary.as_ref());
            distinct(&paths)?;
            let (_, report) = cmd_score(&ScoreConfig {
                traces: a.traces,
                corpus: a.corpus,
                scores: a.scores,
                summary: a.summary,
                mode: a.model.mode.into(),
                top_k: a.model.top_k,
                vocab_size: a.model.vocab_size,
                rounds: a.rounds,
            })?;
            println!("{} scored, {} incomplete", report.scored, report.incomplete);
        }
        Command::Correlate(a) => {
            let mut paths = vec![&a.scores, &a.corpus, &a.report];
            paths.extend(a.scatter.as_ref());
            distinct(&paths)?;
            let report = cmd_correlate(&CorrelateConfig {
                scores: a.scores,
                corpus: a.corpus,
                report: a.report,
                scatter: a.scatter,
            })?;
            for m in &report.metrics {
                println!("{}\tr={:.4}\tp={:.3e}\tn={}", m.metric_name, m.r, m.p, m.n);
            }
        }
        Command::Trajectory(a) => {
            distinct(&[&a.traces, &a.corpus, &a.out_dir, &a.summary])?;
            let summaries = cmd_trajectory(&TrajectoryConfig {
                traces: a.traces,
                corpus: a.corpus,
                out_dir: a.out_dir,
                summary: a.summary,
                mode: a.model.mode.into(),
                alpha: a.alpha,
                top_k: a.model.top_k,
                vocab_size: a.model.vocab_size,
            })?;
            println!("{} curve tables", summaries.len());
        }
        Command::Select(a) => {
            distinct(&[&a.scores, &a.manifest])?;
            let manifest = cmd_select(&SelectConfig {
                scores: a.scores,
                manifest: a.manifest,
                strategy: a.strategy,
                params: SelectionParams {
                    budget: a.budget,
                    seed: (a.strategy == Strategy::Random).then_some(a.seed),
                    rounds: (a.strategy == Strategy::PassRate).then_some(a.rounds),
                    max_tokens: (a.max_tokens > 0).then_some(a.max_tokens),
                },
            })?;
            println!("{}", manifest_summary(&manifest));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
