//! Zero-shot classification: prompt rendering, response parsing and
//! resumable runs over a dataset split.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{Backend, BackendConfig, BackendError, GenerationRequest};
use crate::corpus::{Dataset, Split};
use crate::schema::{all_categories, parse_label, Category, NUM_CATEGORIES};

pub const SENTENCE_PLACEHOLDER: &str = "{{SENTENCE}}";

/// Template shipped with the crate.
pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/zsl_prompt.txt");

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("template error: {0}")]
    Template(String),
    #[error("split {0} is empty")]
    EmptySplit(Split),
    #[error("run store i/o error on {path}: {source}")]
    Store {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Three-part prompt: task objective, the seven category definitions, and
/// a procedure containing the sentence placeholder and the output format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub objective_text: String,
    pub category_definitions: Vec<(Category, String)>,
    pub procedure_text: String,
}

impl PromptTemplate {
    pub fn new(
        objective_text: impl Into<String>,
        category_definitions: Vec<(Category, String)>,
        procedure_text: impl Into<String>,
    ) -> Result<Self, ClassifyError> {
        let t = PromptTemplate {
            objective_text: objective_text.into(),
            category_definitions,
            procedure_text: procedure_text.into(),
        };
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<(), ClassifyError> {
        let n = self.procedure_text.matches(SENTENCE_PLACEHOLDER).count();
        if n != 1 {
            return Err(ClassifyError::Template(format!(
                "procedure must contain {SENTENCE_PLACEHOLDER} exactly once, found {n}"
            )));
        }
        let cats: Vec<Category> = self.category_definitions.iter().map(|(c, _)| *c).collect();
        if cats != all_categories() {
            return Err(ClassifyError::Template(format!(
                "categories must be listed once each in order {:?}, got {:?}",
                all_categories().map(|c| c.canonical_name()),
                cats.iter().map(|c| c.canonical_name()).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    /// Parses the sectioned text format:
    ///
    /// ```text
    /// ## OBJECTIVE
    /// ...
    /// ## CATEGORIES
    /// Overall: ...
    /// Research Gap: ...
    /// ## PROCEDURE
    /// ... {{SENTENCE}} ...
    /// ```
    ///
    /// Section bodies have their surrounding blank lines removed.
    pub fn parse(text: &str) -> Result<Self, ClassifyError> {
        let mut sections: Vec<(&str, Vec<&str>)> = Vec::new();
        for line in text.lines() {
            let header = line.trim_end();
            if matches!(header, "## OBJECTIVE" | "## CATEGORIES" | "## PROCEDURE") {
                sections.push((&header[3..], Vec::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                body.push(line);
            } else if !line.trim().is_empty() {
                return Err(ClassifyError::Template(
                    "text before the first section header".into(),
                ));
            }
        }
        let names: Vec<&str> = sections.iter().map(|(n, _)| *n).collect();
        if names != ["OBJECTIVE", "CATEGORIES", "PROCEDURE"] {
            return Err(ClassifyError::Template(format!(
                "expected sections OBJECTIVE, CATEGORIES, PROCEDURE in order, got {names:?}"
            )));
        }
        let body = |i: usize| sections[i].1.join("\n").trim_matches('\n').to_string();

        let mut defs = Vec::with_capacity(NUM_CATEGORIES);
        for line in body(1).lines().filter(|l| !l.trim().is_empty()) {
            let (name, def) = line.split_once(':').ok_or_else(|| {
                ClassifyError::Template(format!("category line without ':' : {line:?}"))
            })?;
            let cat = parse_label(name.trim_start_matches(['-', '*', ' ']))
                .map_err(|e| ClassifyError::Template(e.to_string()))?;
            defs.push((cat, def.trim().to_string()));
        }
        PromptTemplate::new(body(0), defs, body(2))
    }

    pub fn load(path: &Path) -> std::io::Result<Result<Self, ClassifyError>> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn default_template() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled template is valid")
    }

    /// Everything before and after the placeholder.
    fn render_parts(&self) -> (String, &str) {
        let (before, after) = self
            .procedure_text
            .split_once(SENTENCE_PLACEHOLDER)
            .expect("placeholder checked at construction");
        let mut head = String::new();
        head.push_str(&self.objective_text);
        head.push_str("\n\n");
        for (c, def) in &self.category_definitions {
            head.push_str(c.canonical_name());
            head.push_str(": ");
            head.push_str(def);
            head.push('\n');
        }
        head.push('\n');
        head.push_str(before);
        (head, after)
    }
}

/// Objective, then the definitions in order, then the procedure with the
/// sentence substituted verbatim.
pub fn build_prompt(template: &PromptTemplate, sentence_text: &str) -> String {
    let (head, tail) = template.render_parts();
    let mut out = String::with_capacity(head.len() + sentence_text.len() + tail.len());
    out.push_str(&head);
    out.push_str(sentence_text);
    out.push_str(tail);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Parsed,
    Unparsed,
}

/// Which rule produced (or failed to produce) the label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ParseDiagnostic {
    /// A `CATEGORY: <label>` line, 1-based.
    FormatLine { line: usize },
    /// Exactly one category name appeared as a whole word.
    Fallback,
    /// No format line and zero or several category names.
    NoMatch { names_found: usize },
    /// The backend failed; the response is empty.
    BackendError { message: String },
}

fn format_line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*[*_#>\s]*CATEGORY[*_\s]*:\s*(.+?)\s*$").unwrap())
}

fn name_regexes() -> &'static [(Category, Regex); NUM_CATEGORIES] {
    static RE: OnceLock<[(Category, Regex); NUM_CATEGORIES]> = OnceLock::new();
    RE.get_or_init(|| {
        all_categories().map(|c| {
            let pattern = c.canonical_name().replace(' ', r"\s+");
            (c, Regex::new(&format!(r"\b{pattern}\b")).unwrap())
        })
    })
}

/// Extracts a category from a raw model response.
///
/// The first line of the form `CATEGORY: <label>` with a resolvable label
/// wins. Otherwise, if exactly one canonical category name occurs as a
/// whole word (case-sensitive) anywhere in the response, that category is
/// returned with [`ParseDiagnostic::Fallback`].
pub fn parse_response(raw: &str) -> (Option<Category>, ParseDiagnostic) {
    for (i, line) in raw.lines().enumerate() {
        if let Some(caps) = format_line_regex().captures(line) {
            let label = caps[1].trim_matches(|c: char| c == '*' || c == '_' || c == '"' || c == '\'');
            if let Ok(c) = parse_label(label) {
                return (Some(c), ParseDiagnostic::FormatLine { line: i + 1 });
            }
        }
    }
    let found: Vec<Category> = name_regexes()
        .iter()
        .filter(|(_, re)| re.is_match(raw))
        .map(|(c, _)| *c)
        .collect();
    match found.as_slice() {
        [only] => (Some(*only), ParseDiagnostic::Fallback),
        _ => (
            None,
            ParseDiagnostic::NoMatch {
                names_found: found.len(),
            },
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sentence_id: String,
    pub predicted: Option<Category>,
    pub raw_response: String,
    pub parse_status: ParseStatus,
    pub request_fingerprint: String,
    pub diagnostic: ParseDiagnostic,
}

impl Prediction {
    fn from_response(sentence_id: &str, raw: String, fingerprint: String) -> Self {
        let (predicted, diagnostic) = parse_response(&raw);
        Prediction {
            sentence_id: sentence_id.to_string(),
            predicted,
            raw_response: raw,
            parse_status: if predicted.is_some() {
                ParseStatus::Parsed
            } else {
                ParseStatus::Unparsed
            },
            request_fingerprint: fingerprint,
            diagnostic,
        }
    }

    fn from_error(sentence_id: &str, error: &BackendError, fingerprint: String) -> Self {
        Prediction {
            sentence_id: sentence_id.to_string(),
            predicted: None,
            raw_response: String::new(),
            parse_status: ParseStatus::Unparsed,
            request_fingerprint: fingerprint,
            diagnostic: ParseDiagnostic::BackendError {
                message: error.to_string(),
            },
        }
    }

    pub fn is_backend_error(&self) -> bool {
        matches!(self.diagnostic, ParseDiagnostic::BackendError { .. })
    }
}

/// Run metadata without the predictions; written as the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub model_id: String,
    pub config_snapshot: BackendConfig,
    pub wire_adjustments: Vec<String>,
    pub dataset_name: String,
    pub split: Split,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
    pub total: usize,
    pub parsed: usize,
    pub unparsed: usize,
    pub backend_errors: usize,
    pub backend_calls: usize,
    pub cache_hits: usize,
    /// Free-form settings echoed by the caller, e.g. the resolved CLI config.
    #[serde(default)]
    pub settings: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRun {
    pub manifest: RunManifest,
    pub predictions: Vec<Prediction>,
}

impl ClassificationRun {
    pub const PREDICTIONS_FILE: &'static str = "predictions.jsonl";
    pub const MANIFEST_FILE: &'static str = "manifest.json";

    /// Writes `predictions.jsonl` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut lines = Vec::new();
        for p in &self.predictions {
            serde_json::to_writer(&mut lines, p)?;
            lines.push(b'\n');
        }
        crate::corpus::write_atomic(&dir.join(Self::PREDICTIONS_FILE), &lines)?;
        let mut manifest = serde_json::to_vec_pretty(&self.manifest)?;
        manifest.push(b'\n');
        crate::corpus::write_atomic(&dir.join(Self::MANIFEST_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> std::io::Result<Self> {
        let manifest: RunManifest =
            serde_json::from_reader(BufReader::new(File::open(dir.join(Self::MANIFEST_FILE))?))?;
        let mut predictions = Vec::new();
        for line in BufReader::new(File::open(dir.join(Self::PREDICTIONS_FILE))?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                predictions.push(serde_json::from_str(&line)?);
            }
        }
        Ok(ClassificationRun {
            manifest,
            predictions,
        })
    }
}

/// Append-only cache of model answers keyed by `(model_id, fingerprint)`.
///
/// File-backed stores append one JSON line per new entry and flush
/// immediately, so an interrupted run loses at most the line being written;
/// a truncated trailing line is ignored when reopening.
pub struct RunStore {
    path: Option<PathBuf>,
    inner: Mutex<StoreInner>,
}

struct StoreInner {
    entries: HashMap<(String, String), String>,
    file: Option<File>,
}

#[derive(Serialize, Deserialize)]
struct StoreLine {
    model_id: String,
    request_fingerprint: String,
    raw_response: String,
}

impl RunStore {
    pub fn in_memory() -> Self {
        RunStore {
            path: None,
            inner: Mutex::new(StoreInner {
                entries: HashMap::new(),
                file: None,
            }),
        }
    }

    pub fn open(path: &Path) -> Result<Self, ClassifyError> {
        let err = |source| ClassifyError::Store {
            path: path.display().to_string(),
            source,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(err)?);
            for line in reader.lines() {
                let line = line.map_err(err)?;
                match serde_json::from_str::<StoreLine>(&line) {
                    Ok(e) => {
                        entries
                            .entry((e.model_id, e.request_fingerprint))
                            .or_insert(e.raw_response);
                    }
                    Err(e) => log::warn!("skipping unreadable run-store line: {e}"),
                }
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(err)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(path)
            .map_err(err)?;
        // a crash mid-write can leave the last line unterminated
        let len = file.metadata().map_err(err)?.len();
        if len > 0 {
            use std::io::{Read, Seek, SeekFrom};
            let mut last = [0u8; 1];
            file.seek(SeekFrom::End(-1)).map_err(err)?;
            file.read_exact(&mut last).map_err(err)?;
            if last[0] != b'\n' {
                file.write_all(b"\n").map_err(err)?;
            }
        }
        Ok(RunStore {
            path: Some(path.to_path_buf()),
            inner: Mutex::new(StoreInner {
                entries,
                file: Some(file),
            }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, model_id: &str, fingerprint: &str) -> Option<String> {
        self.inner
            .lock()
            .unwrap()
            .entries
            .get(&(model_id.to_string(), fingerprint.to_string()))
            .cloned()
    }

    /// Records an answer. A second insert for the same key is a no-op.
    pub fn insert(&self, model_id: &str, fingerprint: &str, raw: &str) -> std::io::Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let key = (model_id.to_string(), fingerprint.to_string());
        if inner.entries.contains_key(&key) {
            return Ok(());
        }
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_vec(&StoreLine {
                model_id: model_id.to_string(),
                request_fingerprint: fingerprint.to_string(),
                raw_response: raw.to_string(),
            })?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.flush()?;
        }
        inner.entries.insert(key, raw.to_string());
        Ok(())
    }
}

/// Wall-clock source for run timestamps.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Always returns the same instant.
pub struct FrozenClock(pub u64);

impl Clock for FrozenClock {
    fn now_ms(&self) -> u64 {
        self.0
    }
}

#[derive(Clone, Copy)]
pub struct RunOptions<'a> {
    pub concurrency: usize,
    pub clock: &'a dyn Clock,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        RunOptions {
            concurrency: 1,
            clock: &SystemClock,
        }
    }
}

fn run_id(model_id: &str, dataset: &str, split: Split, fingerprints: &[String]) -> String {
    let mut h = Sha256::new();
    for part in [model_id, dataset, split.as_str()] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    for f in fingerprints {
        h.update(f.as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Classifies every sentence of `split`, in id order.
///
/// Answers already in `store` for the same model and fingerprint are
/// reused; fresh answers are stored as they arrive. A backend failure on one
/// sentence becomes an `Unparsed` prediction carrying the error and is not
/// cached, so a rerun retries it.
pub fn classify_split(
    d: &Dataset,
    split: Split,
    template: &PromptTemplate,
    backend: &dyn Backend,
    store: &RunStore,
    options: RunOptions<'_>,
) -> Result<ClassificationRun, ClassifyError> {
    let records = d.split_records(split);
    if records.is_empty() {
        return Err(ClassifyError::EmptySplit(split));
    }
    let started = options.clock.now_ms();
    let model_id = backend.model_id().to_string();
    let prompts: Vec<(String, String)> = records
        .iter()
        .map(|r| {
            let prompt = build_prompt(template, &r.text);
            let fp = backend.fingerprint(&prompt);
            (prompt, fp)
        })
        .collect();

    let calls = AtomicUsize::new(0);
    let hits = AtomicUsize::new(0);
    let store_error: Mutex<Option<std::io::Error>> = Mutex::new(None);

    let classify_one = |i: usize| -> Prediction {
        let id = &records[i].id;
        let (prompt, fp) = &prompts[i];
        if let Some(raw) = store.get(&model_id, fp) {
            hits.fetch_add(1, Ordering::SeqCst);
            return Prediction::from_response(id, raw, fp.clone());
        }
        calls.fetch_add(1, Ordering::SeqCst);
        match backend.generate(&GenerationRequest::keyed(prompt.clone(), id.clone(), 0)) {
            Ok(result) => {
                if let Err(e) = store.insert(&model_id, fp, &result.text) {
                    store_error.lock().unwrap().get_or_insert(e);
                }
                Prediction::from_response(id, result.text, fp.clone())
            }
            Err(e) => {
                log::warn!("sentence {id}: {e}");
                Prediction::from_error(id, &e, fp.clone())
            }
        }
    };

    let predictions = parallel_map(records.len(), options.concurrency, classify_one);

    if let Some(source) = store_error.into_inner().unwrap() {
        return Err(ClassifyError::Store {
            path: store
                .path()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            source,
        });
    }

    let parsed = predictions
        .iter()
        .filter(|p| p.parse_status == ParseStatus::Parsed)
        .count();
    let backend_errors = predictions.iter().filter(|p| p.is_backend_error()).count();
    let fingerprints: Vec<String> = prompts.into_iter().map(|(_, fp)| fp).collect();
    let config = backend.config().clone();
    let manifest = RunManifest {
        run_id: run_id(&model_id, &d.name, split, &fingerprints),
        model_id,
        wire_adjustments: config.wire_adjustments(),
        config_snapshot: config,
        dataset_name: d.name.clone(),
        split,
        started_at_ms: started,
        finished_at_ms: options.clock.now_ms(),
        total: predictions.len(),
        parsed,
        unparsed: predictions.len() - parsed,
        backend_errors,
        backend_calls: calls.into_inner(),
        cache_hits: hits.into_inner(),
        settings: serde_json::Value::Null,
    };
    Ok(ClassificationRun {
        manifest,
        predictions,
    })
}

/// Maps `f` over `0..n` with at most `workers` threads; output order follows
/// the index, not completion order.
pub(crate) fn parallel_map<T: Send>(
    n: usize,
    workers: usize,
    f: impl Fn(usize) -> T + Sync,
) -> Vec<T> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let v = f(i);
                *slots[i].lock().unwrap() = Some(v);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every index is filled"))
        .collect()
}
