//! Command-line frontend.
//!
//! Flags may also be supplied through `--config <file>` holding flat
//! `key=value` lines whose keys mirror the flag names; explicit flags win.
//! Keys that do not apply to the chosen subcommand are rejected. Usage
//! problems exit with 2, data problems with 1. Logs go to stderr; report data
//! goes only to the requested output files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::calib::{CalibParams, Strategy};
use crate::data::{empirical_prototypes, load_dataset, save_dataset};
use crate::error::Error;
use crate::metrics::MetricOptions;
use crate::protocol::{run_fscil, run_fsl, EpisodeSpec};
use crate::report::{
    build_analyze_report, read_predictions, write_predictions, FscilReport, FslReport, ReportFormat,
};
use crate::synth::{gen_synthetic, SynthSpec};

/// Failure modes with distinct exit codes: usage errors exit 2, data errors
/// exit 1.
#[derive(Debug)]
pub enum RunError {
    Usage(String),
    Data(Error),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Usage(msg) => write!(f, "usage error: {msg}"),
            RunError::Data(err) => write!(f, "error: {err}"),
        }
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) => 2,
            RunError::Data(_) => 1,
        }
    }
}

impl From<Error> for RunError {
    fn from(err: Error) -> Self {
        RunError::Data(err)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "proto-calib",
    about = "Prototype calibration and class-incremental evaluation over embedding files",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the multi-session class-incremental evaluation.
    RunFscil(RunFscilArgs),
    /// Run the episodic few-shot evaluation on the novel classes.
    RunFsl(RunFslArgs),
    /// Generate a synthetic embedding file with known ground truth.
    GenSynthetic(GenSyntheticArgs),
    /// Compare two prediction files and emit the diagnostic table.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct CalibFlags {
    /// Calibration strategy: protonet, teen, or simteen.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Fusion coefficient in [0, 1]; 1 keeps empirical prototypes.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Sharpness of the similarity weights; must be positive.
    #[arg(long)]
    pub tau: Option<f64>,
    /// How many base prototypes the simteen strategy fuses.
    #[arg(long)]
    pub simteen_k: Option<usize>,
    /// Use the mean instead of the sum of the simteen prototypes.
    #[arg(long, action = ArgAction::SetTrue)]
    pub simteen_mean: bool,
}

#[derive(Debug, Args)]
pub struct RunFscilArgs {
    /// Embedding CSV to evaluate.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Where to write the per-session metric report.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Report format: csv or json.
    #[arg(long)]
    pub format: Option<String>,
    /// Optional key=value config file; flags win on conflict.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub calib: CalibFlags,
    /// Similar-base set size used by the tbr diagnostic.
    #[arg(long)]
    pub m_new_similar: Option<usize>,
    /// Fraction of new classes in each similar-new set (tnr diagnostic).
    #[arg(long)]
    pub base_fraction: Option<f64>,
    /// Also write the final session's predictions for later analysis.
    #[arg(long)]
    pub predictions_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunFslArgs {
    /// Embedding CSV; session 0 is the calibration reference, later sessions
    /// form the episode pool.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Where to write the per-episode report.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Report format: csv or json.
    #[arg(long)]
    pub format: Option<String>,
    /// Optional key=value config file; flags win on conflict.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub calib: CalibFlags,
    /// Classes per episode.
    #[arg(long)]
    pub ways: Option<usize>,
    /// Support samples per class.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Query samples per class.
    #[arg(long)]
    pub queries: Option<usize>,
    /// Number of episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Episode sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    /// Where to write the embedding CSV.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Where to write the ground-truth JSON.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Optional key=value config file; flags win on conflict.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub base_classes: Option<usize>,
    #[arg(long)]
    pub new_classes: Option<usize>,
    #[arg(long)]
    pub sessions_after_base: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub base_train_per_class: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub mixture_support: Option<usize>,
    #[arg(long)]
    pub mixture_noise: Option<f64>,
    #[arg(long)]
    pub within_class_sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Embedding CSV the predictions came from; supplies prototypes and the
    /// base/new split.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Prediction file of the first run.
    #[arg(long)]
    pub before: Option<PathBuf>,
    /// Prediction file of the second run.
    #[arg(long)]
    pub after: Option<PathBuf>,
    /// Where to write the diagnostic report.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Report format: csv or json.
    #[arg(long)]
    pub format: Option<String>,
    /// Optional key=value config file; flags win on conflict.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Similar-base set size used by the tbr diagnostic.
    #[arg(long)]
    pub m_new_similar: Option<usize>,
    /// Fraction of new classes in each similar-new set (tnr diagnostic).
    #[arg(long)]
    pub base_fraction: Option<f64>,
    /// Fold changed-but-still-wrong samples into the right-to-wrong row.
    #[arg(long, action = ArgAction::SetTrue)]
    pub collapse_ww: bool,
}

const FSCIL_KEYS: &[&str] = &[
    "embeddings",
    "output",
    "format",
    "strategy",
    "alpha",
    "tau",
    "simteen-k",
    "simteen-mean",
    "m-new-similar",
    "base-fraction",
    "predictions-out",
];
const FSL_KEYS: &[&str] = &[
    "embeddings",
    "output",
    "format",
    "strategy",
    "alpha",
    "tau",
    "simteen-k",
    "simteen-mean",
    "ways",
    "shots",
    "queries",
    "episodes",
    "seed",
];
const SYNTH_KEYS: &[&str] = &[
    "output",
    "ground-truth",
    "base-classes",
    "new-classes",
    "sessions-after-base",
    "dim",
    "base-train-per-class",
    "shots",
    "test-per-class",
    "mixture-support",
    "mixture-noise",
    "within-class-sigma",
    "seed",
];
const ANALYZE_KEYS: &[&str] = &[
    "embeddings",
    "before",
    "after",
    "output",
    "format",
    "m-new-similar",
    "base-fraction",
    "collapse-ww",
];

/// Parsed config file restricted to one command's key set.
struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    fn load(path: Option<&Path>, allowed: &[&str], command: &str) -> Result<Config, RunError> {
        let mut values = BTreeMap::new();
        let Some(path) = path else {
            return Ok(Config { values });
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(RunError::Usage(format!(
                    "config line {} is not key=value: {raw:?}",
                    i + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !allowed.contains(&key) {
                let everywhere = [FSCIL_KEYS, FSL_KEYS, SYNTH_KEYS, ANALYZE_KEYS];
                let known = everywhere.iter().any(|set| set.contains(&key));
                return Err(RunError::Usage(if known {
                    format!("config key {key:?} does not apply to {command}")
                } else {
                    format!("unknown config key {key:?}")
                }));
            }
            values.insert(key.to_string(), value.to_string());
        }
        Ok(Config { values })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, RunError>
    where
        T::Err: fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                RunError::Usage(format!("invalid config value for {key}: {raw:?} ({e})"))
            }),
        }
    }
}

fn pick<T: FromStr>(flag: Option<T>, config: &Config, key: &str) -> Result<Option<T>, RunError>
where
    T::Err: fmt::Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => config.get(key),
    }
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T, RunError> {
    value.ok_or_else(|| RunError::Usage(format!("--{flag} is required (flag or config)")))
}

fn usage(err: Error) -> RunError {
    RunError::Usage(err.to_string())
}

fn parse_flag<T: FromStr>(raw: &str, flag: &str) -> Result<T, RunError>
where
    T::Err: fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| RunError::Usage(format!("invalid --{flag}: {e}")))
}

fn resolve_calib(flags: &CalibFlags, config: &Config) -> Result<CalibParams, RunError> {
    let defaults = CalibParams::default();
    let strategy = match pick(flags.strategy.clone(), config, "strategy")? {
        Some(raw) => parse_flag::<Strategy>(&raw, "strategy")?,
        None => defaults.strategy,
    };
    let params = CalibParams {
        strategy,
        alpha: pick(flags.alpha, config, "alpha")?.unwrap_or(defaults.alpha),
        tau: pick(flags.tau, config, "tau")?.unwrap_or(defaults.tau),
        simteen_k: pick(flags.simteen_k, config, "simteen-k")?.unwrap_or(defaults.simteen_k),
        simteen_mean: flags.simteen_mean
            || config
                .get::<bool>("simteen-mean")?
                .unwrap_or(defaults.simteen_mean),
    };
    params.validate().map_err(usage)?;
    Ok(params)
}

fn resolve_format(flag: Option<String>, config: &Config) -> Result<ReportFormat, RunError> {
    match pick(flag, config, "format")? {
        Some(raw) => parse_flag::<ReportFormat>(&raw, "format"),
        None => Ok(ReportFormat::Csv),
    }
}

fn resolve_metric_options(
    m_new_similar: Option<usize>,
    base_fraction: Option<f64>,
    config: &Config,
) -> Result<MetricOptions, RunError> {
    let defaults = MetricOptions::default();
    let opts = MetricOptions {
        m_new_similar: pick(m_new_similar, config, "m-new-similar")?
            .unwrap_or(defaults.m_new_similar),
        base_fraction: pick(base_fraction, config, "base-fraction")?
            .unwrap_or(defaults.base_fraction),
    };
    opts.validate().map_err(usage)?;
    Ok(opts)
}

/// Fully resolved run-fscil invocation.
#[derive(Debug)]
pub struct FscilJob {
    pub embeddings: PathBuf,
    pub output: PathBuf,
    pub format: ReportFormat,
    pub params: CalibParams,
    pub opts: MetricOptions,
    pub predictions_out: Option<PathBuf>,
}

/// Fully resolved run-fsl invocation.
#[derive(Debug)]
pub struct FslJob {
    pub embeddings: PathBuf,
    pub output: PathBuf,
    pub format: ReportFormat,
    pub params: CalibParams,
    pub episode_spec: EpisodeSpec,
}

/// Fully resolved gen-synthetic invocation.
#[derive(Debug)]
pub struct SynthJob {
    pub output: PathBuf,
    pub ground_truth: PathBuf,
    pub spec: SynthSpec,
}

/// Fully resolved analyze invocation.
#[derive(Debug)]
pub struct AnalyzeJob {
    pub embeddings: PathBuf,
    pub before: PathBuf,
    pub after: PathBuf,
    pub output: PathBuf,
    pub format: ReportFormat,
    pub opts: MetricOptions,
    pub collapse_ww: bool,
}

#[derive(Debug)]
pub enum Job {
    Fscil(FscilJob),
    Fsl(FslJob),
    Synth(SynthJob),
    Analyze(AnalyzeJob),
}

/// Merges flags, config file, and defaults into a concrete job, validating
/// ranges and required paths.
pub fn resolve(command: Command) -> Result<Job, RunError> {
    match command {
        Command::RunFscil(args) => {
            let config = Config::load(args.config.as_deref(), FSCIL_KEYS, "run-fscil")?;
            Ok(Job::Fscil(FscilJob {
                embeddings: require(pick(args.embeddings, &config, "embeddings")?, "embeddings")?,
                output: require(pick(args.output, &config, "output")?, "output")?,
                format: resolve_format(args.format, &config)?,
                params: resolve_calib(&args.calib, &config)?,
                opts: resolve_metric_options(args.m_new_similar, args.base_fraction, &config)?,
                predictions_out: pick(args.predictions_out, &config, "predictions-out")?,
            }))
        }
        Command::RunFsl(args) => {
            let config = Config::load(args.config.as_deref(), FSL_KEYS, "run-fsl")?;
            let defaults = EpisodeSpec::default();
            let episode_spec = EpisodeSpec {
                ways: pick(args.ways, &config, "ways")?.unwrap_or(defaults.ways),
                shots: pick(args.shots, &config, "shots")?.unwrap_or(defaults.shots),
                queries: pick(args.queries, &config, "queries")?.unwrap_or(defaults.queries),
                episodes: pick(args.episodes, &config, "episodes")?.unwrap_or(defaults.episodes),
                seed: pick(args.seed, &config, "seed")?.unwrap_or(defaults.seed),
            };
            episode_spec.validate().map_err(usage)?;
            Ok(Job::Fsl(FslJob {
                embeddings: require(pick(args.embeddings, &config, "embeddings")?, "embeddings")?,
                output: require(pick(args.output, &config, "output")?, "output")?,
                format: resolve_format(args.format, &config)?,
                params: resolve_calib(&args.calib, &config)?,
                episode_spec,
            }))
        }
        Command::GenSynthetic(args) => {
            let config = Config::load(args.config.as_deref(), SYNTH_KEYS, "gen-synthetic")?;
            let d = SynthSpec::default();
            let spec = SynthSpec {
                base_classes: pick(args.base_classes, &config, "base-classes")?
                    .unwrap_or(d.base_classes),
                new_classes: pick(args.new_classes, &config, "new-classes")?
                    .unwrap_or(d.new_classes),
                sessions_after_base: pick(
                    args.sessions_after_base,
                    &config,
                    "sessions-after-base",
                )?
                .unwrap_or(d.sessions_after_base),
                dim: pick(args.dim, &config, "dim")?.unwrap_or(d.dim),
                base_train_per_class: pick(
                    args.base_train_per_class,
                    &config,
                    "base-train-per-class",
                )?
                .unwrap_or(d.base_train_per_class),
                shots: pick(args.shots, &config, "shots")?.unwrap_or(d.shots),
                test_per_class: pick(args.test_per_class, &config, "test-per-class")?
                    .unwrap_or(d.test_per_class),
                mixture_support: pick(args.mixture_support, &config, "mixture-support")?
                    .unwrap_or(d.mixture_support),
                mixture_noise: pick(args.mixture_noise, &config, "mixture-noise")?
                    .unwrap_or(d.mixture_noise),
                within_class_sigma: pick(args.within_class_sigma, &config, "within-class-sigma")?
                    .unwrap_or(d.within_class_sigma),
                seed: pick(args.seed, &config, "seed")?.unwrap_or(d.seed),
            };
            spec.validate().map_err(usage)?;
            Ok(Job::Synth(SynthJob {
                output: require(pick(args.output, &config, "output")?, "output")?,
                ground_truth: require(
                    pick(args.ground_truth, &config, "ground-truth")?,
                    "ground-truth",
                )?,
                spec,
            }))
        }
        Command::Analyze(args) => {
            let config = Config::load(args.config.as_deref(), ANALYZE_KEYS, "analyze")?;
            Ok(Job::Analyze(AnalyzeJob {
                embeddings: require(pick(args.embeddings, &config, "embeddings")?, "embeddings")?,
                before: require(pick(args.before, &config, "before")?, "before")?,
                after: require(pick(args.after, &config, "after")?, "after")?,
                output: require(pick(args.output, &config, "output")?, "output")?,
                format: resolve_format(args.format, &config)?,
                opts: resolve_metric_options(args.m_new_similar, args.base_fraction, &config)?,
                collapse_ww: args.collapse_ww
                    || config.get::<bool>("collapse-ww")?.unwrap_or(false),
            }))
        }
    }
}

fn write_output(
    path: &Path,
    write: impl FnOnce(&mut dyn Write) -> crate::error::Result<()>,
) -> Result<(), RunError> {
    let mut out = BufWriter::new(File::create(path).map_err(Error::from)?);
    write(&mut out)?;
    out.flush().map_err(Error::from)?;
    Ok(())
}

/// Executes a resolved job. Everything past argument validation maps to data
/// errors (exit 1).
pub fn execute(job: Job) -> Result<(), RunError> {
    match job {
        Job::Fscil(job) => {
            let dataset = load_dataset(&job.embeddings)?;
            let results = run_fscil(&dataset, &job.params, &job.opts)?;
            let report = FscilReport::from_results(&results)?;
            write_output(&job.output, |out| report.write(job.format, out))?;
            if let Some(path) = &job.predictions_out {
                let last = results.last().expect("at least one session");
                write_output(path, |out| {
                    write_predictions(&last.predictions, &last.true_labels, out)
                })?;
                eprintln!(
                    "run-fscil: wrote session {} predictions to {}",
                    last.session,
                    path.display()
                );
            }
            eprintln!(
                "run-fscil: {} sessions evaluated with strategy {}, report at {}",
                results.len(),
                job.params.strategy.as_str(),
                job.output.display()
            );
            Ok(())
        }
        Job::Fsl(job) => {
            let dataset = load_dataset(&job.embeddings)?;
            let summary = run_fsl(&dataset, &job.episode_spec, &job.params)?;
            let report = FslReport::from_summary(&summary);
            write_output(&job.output, |out| report.write(job.format, out))?;
            match summary.ci_half_width {
                Some(ci) => eprintln!(
                    "run-fsl: {} episodes, accuracy {:.2} +/- {:.2}, report at {}",
                    summary.accuracies.len(),
                    summary.mean,
                    ci,
                    job.output.display()
                ),
                None => eprintln!(
                    "run-fsl: 1 episode, accuracy {:.2}, report at {}",
                    summary.mean,
                    job.output.display()
                ),
            }
            Ok(())
        }
        Job::Synth(job) => {
            let (dataset, ground_truth) = gen_synthetic(&job.spec)?;
            save_dataset(&dataset, &job.output)?;
            ground_truth.save(&job.ground_truth)?;
            eprintln!(
                "gen-synthetic: {} records over {} sessions at {}, ground truth at {}",
                dataset.records().len(),
                dataset.layout().session_count(),
                job.output.display(),
                job.ground_truth.display()
            );
            Ok(())
        }
        Job::Analyze(job) => {
            let dataset = load_dataset(&job.embeddings)?;
            let mut registry = empirical_prototypes(&dataset, 0)?;
            for session in 1..dataset.layout().session_count() {
                registry.merge(empirical_prototypes(&dataset, session)?)?;
            }
            let base_ids = dataset.layout().label_space(0).clone();
            let before = read_predictions(&job.before)?;
            let after = read_predictions(&job.after)?;
            let report = build_analyze_report(
                &before,
                &after,
                &registry,
                &base_ids,
                &job.opts,
                job.collapse_ww,
            )?;
            write_output(&job.output, |out| report.write(job.format, out))?;
            eprintln!(
                "analyze: {} samples compared, report at {}",
                report.total,
                job.output.display()
            );
            Ok(())
        }
    }
}

/// Reads `PROTO_CALIB_THREADS` and sizes the global worker pool; 0 or absent
/// leaves the automatic sizing.
pub fn init_threads() -> Result<(), RunError> {
    let Ok(raw) = std::env::var("PROTO_CALIB_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .map_err(|_| RunError::Usage(format!("invalid PROTO_CALIB_THREADS value {raw:?}")))?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| RunError::Usage(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}
