//! The `scisent` command line.
//!
//! Exit codes: 0 success, 1 validation violations, 2 invalid configuration
//! or input, 3 I/O failure, 4 authentication failure, 5 run/dataset
//! mismatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::agreement::{agreement_report, load_ratings, AgreementError};
use crate::augment::{
    augment_dataset, similarity_report, AugmentError, AugmentationPolicy, DEFAULT_SIMILARITY_BAND,
};
use crate::backend::{
    Backend, BackendConfig, BackendError, GenerationRequest, GenerationResult, HttpBackend,
    MockBackend, MockFixtures, API_KEY_ENV,
};
use crate::classify::{
    classify_split, ClassificationRun, ClassifyError, Clock, FrozenClock, PromptTemplate,
    RunOptions, RunStore, SystemClock,
};
use crate::corpus::{
    load_dataset, save_dataset, stratified_split, validate_dataset, write_atomic, CorpusError,
    Dataset, Format, Profile, Split, SplitRatios,
};
use crate::metrics::{compare_runs, evaluate_run, EvalReport, MetricsError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_AUTH: i32 = 4;
pub const EXIT_MISMATCH: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "scisent", version, about = "Rhetorical-role classification of related-work sentences")]
struct Cli {
    /// Flat TOML file with backend, path and policy settings.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Answer generation requests from a JSON fixture table instead of the network.
    #[arg(long, global = true, value_name = "PATH")]
    mock: Option<PathBuf>,
    /// Maximum in-flight backend requests.
    #[arg(long, global = true, value_name = "N")]
    concurrency: Option<usize>,
    /// Stamp manifests with time 0 so that reruns are byte-identical.
    #[arg(long, global = true)]
    frozen_clock: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a dataset against a size profile.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "none")]
        profile: Profile,
        /// Write violations as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assign train/validation/test splits per category.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train: Option<f64>,
        #[arg(long)]
        val: Option<f64>,
        #[arg(long)]
        test: Option<f64>,
    },
    /// Zero-shot classification of one split.
    Classify {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Output directory for predictions.jsonl, manifest.json and cache.jsonl.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        template: Option<PathBuf>,
        /// Response cache; defaults to OUT/cache.jsonl.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, conflicts_with = "cache")]
        no_cache: bool,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Score a run against gold labels.
    Eval {
        /// Run directory written by `classify`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to the run's own split.
        #[arg(long)]
        split: Option<Split>,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write confusion.svg.
        #[arg(long)]
        svg: bool,
    },
    /// Inter-annotator agreement from raw labels or a count matrix.
    Agree {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add gated paraphrases of train and validation sentences.
    Augment {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Completion report; defaults to OUT with a `.report.json` suffix.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        variants: Option<usize>,
        #[arg(long)]
        min_distance: Option<f64>,
        #[arg(long)]
        max_attempts: Option<u32>,
        #[arg(long)]
        augment_template: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Per-category and macro deltas between two eval reports (b - a).
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Similarity table of an augmented dataset.
    Report {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        band_low: Option<f64>,
        #[arg(long)]
        band_high: Option<f64>,
    },
}

#[derive(Debug, Args, Default)]
struct BackendArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    /// 0 means unset.
    #[arg(long)]
    top_k: Option<u32>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    clamp_top_p_min: bool,
    #[arg(long)]
    send_top_k: bool,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub endpoint_url: Option<String>,
    pub model_id: Option<String>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    /// 0 means unset.
    pub top_k: Option<u32>,
    pub max_tokens: Option<u32>,
    pub timeout_ms: Option<u64>,
    pub max_retries: Option<u32>,
    pub backoff_initial_ms: Option<u64>,
    pub backoff_factor: Option<f64>,
    pub backoff_max_ms: Option<u64>,
    pub clamp_top_p_min: Option<bool>,
    pub send_top_k: Option<bool>,
    pub concurrency: Option<usize>,
    pub template: Option<PathBuf>,
    pub augment_template: Option<PathBuf>,
    pub variants_per_sentence: Option<usize>,
    pub min_distance: Option<f64>,
    pub max_regeneration_attempts: Option<u32>,
    pub seed: Option<u64>,
    pub train_ratio: Option<f64>,
    pub val_ratio: Option<f64>,
    pub test_ratio: Option<f64>,
    pub band_low: Option<f64>,
    pub band_high: Option<f64>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

pub const DEFAULT_SEED: u64 = 42;

/// Effective settings after merging defaults, the config file and flags.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliConfig {
    pub backend: BackendConfig,
    pub template: Option<PathBuf>,
    pub augment_template: Option<PathBuf>,
    pub variants_per_sentence: usize,
    pub min_distance: f64,
    pub max_regeneration_attempts: u32,
    pub seed: u64,
    pub ratios: [f64; 3],
    pub band: (f64, f64),
    pub mock: Option<PathBuf>,
    pub frozen_clock: bool,
}

impl CliConfig {
    fn resolve(file: FileConfig, cli: &Cli) -> CliConfig {
        let mut backend = BackendConfig::default();
        let policy = AugmentationPolicy::default();
        let ratios = SplitRatios::default();
        let f = file;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(backend.endpoint_url, f.endpoint_url);
        set!(backend.model_id, f.model_id);
        set!(backend.temperature, f.temperature);
        set!(backend.top_p, f.top_p);
        if let Some(k) = f.top_k {
            backend.top_k = (k > 0).then_some(k);
        }
        set!(backend.max_tokens, f.max_tokens);
        if let Some(ms) = f.timeout_ms {
            backend.timeout = Duration::from_millis(ms);
        }
        set!(backend.max_retries, f.max_retries);
        if let Some(ms) = f.backoff_initial_ms {
            backend.backoff.initial = Duration::from_millis(ms);
        }
        set!(backend.backoff.factor, f.backoff_factor);
        if let Some(ms) = f.backoff_max_ms {
            backend.backoff.max = Duration::from_millis(ms);
        }
        set!(backend.clamp_top_p_min, f.clamp_top_p_min);
        set!(backend.send_top_k, f.send_top_k);
        set!(backend.concurrency, f.concurrency);

        let mut cfg = CliConfig {
            backend,
            template: f.template,
            augment_template: f.augment_template,
            variants_per_sentence: f.variants_per_sentence.unwrap_or(policy.variants_per_sentence),
            min_distance: f.min_distance.unwrap_or(policy.min_distance),
            max_regeneration_attempts: f
                .max_regeneration_attempts
                .unwrap_or(policy.max_regeneration_attempts),
            seed: f.seed.unwrap_or(DEFAULT_SEED),
            ratios: [
                f.train_ratio.unwrap_or(ratios.train),
                f.val_ratio.unwrap_or(ratios.validation),
                f.test_ratio.unwrap_or(ratios.test),
            ],
            band: (
                f.band_low.unwrap_or(DEFAULT_SIMILARITY_BAND.0),
                f.band_high.unwrap_or(DEFAULT_SIMILARITY_BAND.1),
            ),
            mock: cli.mock.clone(),
            frozen_clock: cli.frozen_clock,
        };
        set!(cfg.backend.concurrency, cli.concurrency);
        cfg
    }

    fn apply_backend_args(&mut self, a: &BackendArgs) {
        let b = &mut self.backend;
        if let Some(v) = &a.model {
            b.model_id = v.clone();
        }
        if let Some(v) = &a.endpoint {
            b.endpoint_url = v.clone();
        }
        if let Some(v) = a.temperature {
            b.temperature = v;
        }
        if let Some(v) = a.top_p {
            b.top_p = v;
        }
        if let Some(k) = a.top_k {
            b.top_k = (k > 0).then_some(k);
        }
        if let Some(v) = a.max_tokens {
            b.max_tokens = v;
        }
        if let Some(ms) = a.timeout_ms {
            b.timeout = Duration::from_millis(ms);
        }
        if let Some(v) = a.max_retries {
            b.max_retries = v;
        }
        b.clamp_top_p_min |= a.clamp_top_p_min;
        b.send_top_k |= a.send_top_k;
    }

    fn clock(&self) -> Box<dyn Clock> {
        if self.frozen_clock {
            Box::new(FrozenClock(0))
        } else {
            Box::new(SystemClock)
        }
    }
}

#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

type CliResult = Result<i32, CliError>;

fn fail(code: i32, message: impl Into<String>) -> CliError {
    CliError {
        code,
        message: message.into(),
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let code = match e {
            CorpusError::Io { .. } => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        fail(code, e.to_string())
    }
}

impl From<ClassifyError> for CliError {
    fn from(e: ClassifyError) -> Self {
        let code = match e {
            ClassifyError::Store { .. } => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        fail(code, e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        let code = match e {
            MetricsError::IdMismatch(_) | MetricsError::SplitMismatch(..) => EXIT_MISMATCH,
            _ => EXIT_CONFIG,
        };
        fail(code, e.to_string())
    }
}

impl From<AgreementError> for CliError {
    fn from(e: AgreementError) -> Self {
        let code = match e {
            AgreementError::Io { .. } => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        fail(code, e.to_string())
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        fail(EXIT_CONFIG, e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        let code = match e {
            BackendError::Auth(_) => EXIT_AUTH,
            _ => EXIT_CONFIG,
        };
        fail(code, e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    fail(EXIT_IO, format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    write_atomic(path, contents).map_err(|e| io_err(path, e))
}

fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    Ok(load_dataset(path, Format::from_path(path))?)
}

fn ensure_distinct(input: &Path, output: &Path) -> Result<(), CliError> {
    let same = match (input.canonicalize(), output.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => input == output,
    };
    if same {
        return Err(fail(
            EXIT_CONFIG,
            format!("refusing to overwrite input file {}", input.display()),
        ));
    }
    Ok(())
}

/// Counts authentication failures of the wrapped backend.
struct AuthWatch<'a> {
    inner: &'a dyn Backend,
    auth_failures: AtomicUsize,
}

impl Backend for AuthWatch<'_> {
    fn config(&self) -> &BackendConfig {
        self.inner.config()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let r = self.inner.generate(request);
        if let Err(BackendError::Auth(_)) = &r {
            self.auth_failures.fetch_add(1, Ordering::SeqCst);
        }
        r
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn fingerprint(&self, prompt: &str) -> String {
        self.inner.fingerprint(prompt)
    }
}

fn make_backend(cfg: &CliConfig) -> Result<Box<dyn Backend>, CliError> {
    cfg.backend.validate()?;
    match &cfg.mock {
        Some(path) => {
            let fixtures = MockFixtures::load(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::InvalidData => {
                    fail(EXIT_CONFIG, format!("{}: {e}", path.display()))
                }
                _ => io_err(path, e),
            })?;
            Ok(Box::new(MockBackend::new(cfg.backend.clone(), fixtures)))
        }
        None => {
            let backend = HttpBackend::from_env(cfg.backend.clone())?;
            if std::env::var(API_KEY_ENV).map_or(true, |k| k.is_empty()) {
                return Err(fail(EXIT_AUTH, format!("{API_KEY_ENV} is not set")));
            }
            Ok(Box::new(backend))
        }
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    let file = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            FileConfig::parse(&text)
                .map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let mut cfg = CliConfig::resolve(file, &cli);
    match &cli.command {
        Command::Validate {
            dataset,
            profile,
            out,
        } => cmd_validate(dataset, *profile, out.as_deref()),
        Command::Split {
            dataset,
            out,
            seed,
            train,
            val,
            test,
        } => {
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            for (slot, v) in cfg.ratios.iter_mut().zip([train, val, test]) {
                if let Some(v) = v {
                    *slot = *v;
                }
            }
            cmd_split(&cfg, dataset, out)
        }
        Command::Classify {
            dataset,
            split,
            out,
            template,
            cache,
            no_cache,
            backend,
        } => {
            cfg.apply_backend_args(backend);
            if template.is_some() {
                cfg.template = template.clone();
            }
            let cache = if *no_cache {
                None
            } else {
                Some(cache.clone().unwrap_or_else(|| out.join("cache.jsonl")))
            };
            cmd_classify(&cfg, dataset, *split, out, cache.as_deref())
        }
        Command::Eval {
            run,
            dataset,
            split,
            out,
            svg,
        } => cmd_eval(run, dataset, *split, out.as_deref().unwrap_or(run), *svg),
        Command::Agree { ratings, out } => cmd_agree(ratings, out.as_deref()),
        Command::Augment {
            dataset,
            out,
            report,
            variants,
            min_distance,
            max_attempts,
            augment_template,
            backend,
        } => {
            cfg.apply_backend_args(backend);
            if let Some(v) = variants {
                cfg.variants_per_sentence = *v;
            }
            if let Some(v) = min_distance {
                cfg.min_distance = *v;
            }
            if let Some(v) = max_attempts {
                cfg.max_regeneration_attempts = *v;
            }
            if augment_template.is_some() {
                cfg.augment_template = augment_template.clone();
            }
            let report = report.clone().unwrap_or_else(|| {
                let mut s = out.clone().into_os_string();
                s.push(".report.json");
                PathBuf::from(s)
            });
            cmd_augment(&cfg, dataset, out, &report)
        }
        Command::Compare { a, b, out } => cmd_compare(a, b, out.as_deref()),
        Command::Report {
            dataset,
            out,
            band_low,
            band_high,
        } => {
            if let Some(v) = band_low {
                cfg.band.0 = *v;
            }
            if let Some(v) = band_high {
                cfg.band.1 = *v;
            }
            cmd_report(&cfg, dataset, out.as_deref())
        }
    }
}

fn cmd_validate(dataset: &Path, profile: Profile, out: Option<&Path>) -> CliResult {
    let d = read_dataset(dataset)?;
    let report = validate_dataset(&d, profile);
    if let Some(out) = out {
        let mut json = serde_json::to_string_pretty(&report.violations).expect("strings serialize");
        json.push('\n');
        write_file(out, json.as_bytes())?;
    }
    for v in &report.violations {
        println!("{v}");
    }
    if report.is_valid() {
        println!("valid: {} records", d.len());
        Ok(EXIT_OK)
    } else {
        println!("invalid: {} violations", report.violations.len());
        Ok(EXIT_INVALID)
    }
}

fn cmd_split(cfg: &CliConfig, dataset: &Path, out: &Path) -> CliResult {
    ensure_distinct(dataset, out)?;
    let d = read_dataset(dataset)?;
    let ratios = SplitRatios {
        train: cfg.ratios[0],
        validation: cfg.ratios[1],
        test: cfg.ratios[2],
    };
    let split = stratified_split(&d, ratios, cfg.seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    save_dataset(&split, out, Format::from_path(out))?;
    let counts = split.split_counts();
    let n = |s| counts.get(&s).copied().unwrap_or(0);
    println!(
        "split {} records: train {}, validation {}, test {} (seed {})",
        split.len(),
        n(Split::Train),
        n(Split::Validation),
        n(Split::Test),
        cfg.seed
    );
    Ok(EXIT_OK)
}

fn load_template(path: Option<&Path>) -> Result<PromptTemplate, CliError> {
    match path {
        None => Ok(PromptTemplate::default_template()),
        Some(p) => PromptTemplate::load(p)
            .map_err(|e| io_err(p, e))?
            .map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", p.display()))),
    }
}

fn cmd_classify(
    cfg: &CliConfig,
    dataset: &Path,
    split: Split,
    out: &Path,
    cache: Option<&Path>,
) -> CliResult {
    let template = load_template(cfg.template.as_deref())?;
    let d = read_dataset(dataset)?;
    if d.split_records(split).is_empty() {
        return Err(ClassifyError::EmptySplit(split).into());
    }
    let backend = make_backend(cfg)?;
    let watch = AuthWatch {
        inner: backend.as_ref(),
        auth_failures: AtomicUsize::new(0),
    };
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let store = match cache {
        Some(p) => RunStore::open(p)?,
        None => RunStore::in_memory(),
    };
    let clock = cfg.clock();
    let mut run = classify_split(
        &d,
        split,
        &template,
        &watch,
        &store,
        RunOptions {
            concurrency: cfg.backend.concurrency,
            clock: clock.as_ref(),
        },
    )?;
    run.manifest.settings = serde_json::to_value(cfg).expect("config serializes");
    run.save(out).map_err(|e| io_err(out, e))?;

    let m = &run.manifest;
    println!(
        "classified {} sentences: {} parsed, {} unparsed ({} backend errors, {} cache hits); run {} in {}",
        m.total,
        m.parsed,
        m.unparsed,
        m.backend_errors,
        m.cache_hits,
        m.run_id,
        out.display()
    );
    if watch.auth_failures.load(Ordering::SeqCst) == m.total {
        return Err(fail(EXIT_AUTH, "every request failed authentication"));
    }
    Ok(EXIT_OK)
}

fn cmd_eval(
    run_dir: &Path,
    dataset: &Path,
    split: Option<Split>,
    out: &Path,
    svg: bool,
) -> CliResult {
    let run = ClassificationRun::load(run_dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::InvalidData => fail(EXIT_CONFIG, format!("{}: {e}", run_dir.display())),
        _ => io_err(run_dir, e),
    })?;
    let d = read_dataset(dataset)?;
    let split = split.unwrap_or(run.manifest.split);
    let report = evaluate_run(&run, &d, split)?;
    write_file(&out.join("report.json"), report.to_json().as_bytes())?;
    write_file(&out.join("report.csv"), report.to_csv().as_bytes())?;
    write_file(&out.join("confusion.csv"), report.matrix.to_csv().as_bytes())?;
    if svg {
        let title = format!("{} on {}", run.manifest.model_id, split);
        write_file(&out.join("confusion.svg"), report.matrix.to_svg(&title).as_bytes())?;
    }
    let m = report.macro_avg;
    println!(
        "macro P={:.3} R={:.3} F1={:.3} (unparsed {})",
        m.precision, m.recall, m.f1, report.unparsed_count
    );
    Ok(EXIT_OK)
}

fn cmd_agree(ratings: &Path, out: Option<&Path>) -> CliResult {
    let matrix = load_ratings(ratings)?;
    let report = agreement_report(&matrix)?;
    if let Some(out) = out {
        let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
        json.push('\n');
        write_file(out, json.as_bytes())?;
    }
    for (name, v) in &report.gwet_ac1_per_category {
        println!("{name}: AC1 {v:.3}");
    }
    println!(
        "{} items, {} raters: kappa {:.3}, AC1 {:.3}",
        report.items, report.raters, report.fleiss_kappa, report.gwet_ac1
    );
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct AugmentReportFile<'a> {
    #[serde(flatten)]
    completion: &'a crate::augment::CompletionReport,
    settings: &'a CliConfig,
}

fn cmd_augment(cfg: &CliConfig, dataset: &Path, out: &Path, report_path: &Path) -> CliResult {
    ensure_distinct(dataset, out)?;
    let mut policy = AugmentationPolicy {
        variants_per_sentence: cfg.variants_per_sentence,
        min_distance: cfg.min_distance,
        max_regeneration_attempts: cfg.max_regeneration_attempts,
        ..AugmentationPolicy::default()
    };
    if let Some(p) = &cfg.augment_template {
        policy.generation_template = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
    }
    policy.validate()?;
    let d = read_dataset(dataset)?;
    let backend = make_backend(cfg)?;
    let (augmented, completion) =
        augment_dataset(&d, backend.as_ref(), &policy, cfg.backend.concurrency)?;
    if completion.sources > 0 && completion.backend_errors > 0 && completion.new_records == 0 {
        log::warn!("no variants were generated; check the backend");
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    save_dataset(&augmented, out, Format::from_path(out))?;
    let file = AugmentReportFile {
        completion: &completion,
        settings: cfg,
    };
    let mut json = serde_json::to_string_pretty(&file).expect("report serializes");
    json.push('\n');
    write_file(report_path, json.as_bytes())?;
    let n = |s: &str| completion.new_by_split.get(s).copied().unwrap_or(0);
    println!(
        "added {} records (train {}, validation {}); {} complete, {} exhausted",
        completion.new_records,
        n("train"),
        n("validation"),
        completion.complete,
        completion.exhausted
    );
    Ok(EXIT_OK)
}

fn read_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

fn cmd_compare(a: &Path, b: &Path, out: Option<&Path>) -> CliResult {
    let cmp = compare_runs(&read_report(a)?, &read_report(b)?)?;
    let csv = cmp.to_csv();
    match out {
        Some(p) => write_file(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    println!(
        "macro deltas: P {:+.3} R {:+.3} F1 {:+.3}",
        cmp.macro_avg.precision, cmp.macro_avg.recall, cmp.macro_avg.f1
    );
    Ok(EXIT_OK)
}

fn cmd_report(cfg: &CliConfig, dataset: &Path, out: Option<&Path>) -> CliResult {
    let d = read_dataset(dataset)?;
    let report = similarity_report(&d, cfg.band)?;
    let csv = report.to_csv();
    match out {
        Some(p) => write_file(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    if report.within_band() {
        println!("all cells within [{:.2}, {:.2}]", cfg.band.0, cfg.band.1);
    } else {
        for cell in &report.out_of_band {
            eprintln!("outside band: {cell}");
        }
        println!(
            "{} cells outside [{:.2}, {:.2}]",
            report.out_of_band.len(),
            cfg.band.0,
            cfg.band.1
        );
    }
    Ok(EXIT_OK)
}
