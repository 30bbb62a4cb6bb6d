//! Sentence datasets: loading, validation, stratified splitting and saving.
//!
//! The canonical on-disk format is JSON Lines, one record per line:
//!
//! ```text
//! {"id": "s1", "text": "...", "label": "research_gap", "split": "train",
//!  "provenance": "manual", "source_id": null}
//! ```
//!
//! CSV files carry the same columns with a header row.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{all_categories, Category, NUM_CATEGORIES};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("category {0} has no records")]
    EmptyCategory(Category),
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Manual,
    Synthetic,
}

/// One annotated sentence.
///
/// `split` is `None` only for records that have not been through
/// [`stratified_split`] yet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: String,
    pub text: String,
    pub label: Category,
    pub split: Option<Split>,
    pub provenance: Provenance,
    pub source_id: Option<String>,
}

impl SentenceRecord {
    pub fn manual(id: impl Into<String>, text: impl Into<String>, label: Category) -> Self {
        SentenceRecord {
            id: id.into(),
            text: text.into(),
            label,
            split: None,
            provenance: Provenance::Manual,
            source_id: None,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<SentenceRecord>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, records: Vec<SentenceRecord>) -> Self {
        Dataset {
            name: name.into(),
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of one split, sorted by id.
    pub fn split_records(&self, split: Split) -> Vec<&SentenceRecord> {
        let mut out: Vec<_> = self
            .records
            .iter()
            .filter(|r| r.split == Some(split))
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    pub fn get(&self, id: &str) -> Option<&SentenceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            if let Some(s) = r.split {
                *counts.entry(s).or_insert(0) += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    JsonLines,
    Csv,
}

impl Format {
    /// `.csv` selects CSV; anything else is JSON Lines.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::JsonLines,
        }
    }
}

/// Wire shape shared by both formats.
#[derive(Debug, Serialize, Deserialize)]
struct RecordRow {
    id: Option<String>,
    text: Option<String>,
    label: Option<String>,
    #[serde(default)]
    split: Option<String>,
    provenance: Option<String>,
    #[serde(default)]
    source_id: Option<String>,
}

impl RecordRow {
    fn from_record(r: &SentenceRecord) -> Self {
        RecordRow {
            id: Some(r.id.clone()),
            text: Some(r.text.clone()),
            label: Some(r.label.snake_name().to_string()),
            split: r.split.map(|s| s.as_str().to_string()),
            provenance: Some(
                match r.provenance {
                    Provenance::Manual => "manual",
                    Provenance::Synthetic => "synthetic",
                }
                .to_string(),
            ),
            source_id: r.source_id.clone(),
        }
    }

    fn into_record(self) -> Result<SentenceRecord, String> {
        fn required(field: Option<String>, name: &str) -> Result<String, String> {
            match field {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(format!("missing field `{name}`")),
            }
        }
        let id = required(self.id, "id")?;
        let text = required(self.text, "text")?;
        let label_text = required(self.label, "label")?;
        let label = label_text
            .parse::<Category>()
            .map_err(|e| e.to_string())?;
        let split = match self.split.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<Split>()?),
        };
        let provenance = match required(self.provenance, "provenance")?.as_str() {
            "manual" => Provenance::Manual,
            "synthetic" => Provenance::Synthetic,
            other => return Err(format!("unknown provenance {other:?}")),
        };
        let source_id = self.source_id.filter(|s| !s.is_empty());
        if provenance == Provenance::Synthetic && source_id.is_none() {
            return Err("synthetic record without `source_id`".into());
        }
        if provenance == Provenance::Manual && source_id.is_some() {
            return Err("manual record with a `source_id`".into());
        }
        Ok(SentenceRecord {
            id,
            text,
            label,
            split,
            provenance,
            source_id,
        })
    }
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string()
}

/// Reads a dataset, preserving file order. The dataset is named after the
/// file stem.
pub fn load_dataset(path: &Path, format: Format) -> Result<Dataset, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut rows: Vec<(usize, RecordRow)> = Vec::new();
    match format {
        Format::JsonLines => {
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line_no = idx + 1;
                let line = line.map_err(|e| CorpusError::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let row: RecordRow =
                    serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                        line: line_no,
                        reason: e.to_string(),
                    })?;
                rows.push((line_no, row));
            }
        }
        Format::Csv => {
            let mut reader = csv::Reader::from_reader(file);
            let csv_err = |e: csv::Error| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                match e.kind() {
                    csv::ErrorKind::Io(_) => CorpusError::io(path, std::io::Error::other(e.to_string())),
                    _ => CorpusError::MalformedRecord {
                        line,
                        reason: e.to_string(),
                    },
                }
            };
            let headers = reader.headers().map_err(csv_err)?.clone();
            let mut raw = csv::StringRecord::new();
            while reader.read_record(&mut raw).map_err(csv_err)? {
                let line = raw.position().map(|p| p.line() as usize).unwrap_or(0);
                let row: RecordRow = raw
                    .deserialize(Some(&headers))
                    .map_err(|e| CorpusError::MalformedRecord {
                        line,
                        reason: e.to_string(),
                    })?;
                rows.push((line, row));
            }
        }
    }

    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        let record = row
            .into_record()
            .map_err(|reason| CorpusError::MalformedRecord { line, reason })?;
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::MalformedRecord {
                line,
                reason: format!("duplicate id {:?}", record.id),
            });
        }
        records.push(record);
    }
    Ok(Dataset::new(dataset_name(path), records))
}

/// Writes records sorted by id. The write goes to a temporary file in the
/// target directory which is then renamed over `path`.
pub fn save_dataset(d: &Dataset, path: &Path, format: Format) -> Result<(), CorpusError> {
    let mut sorted: Vec<&SentenceRecord> = d.records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    let mut buf: Vec<u8> = Vec::new();
    match format {
        Format::JsonLines => {
            for r in sorted {
                serde_json::to_writer(&mut buf, &RecordRow::from_record(r))
                    .expect("record rows always serialize");
                buf.push(b'\n');
            }
        }
        Format::Csv => {
            let mut writer = csv::Writer::from_writer(&mut buf);
            for r in sorted {
                writer
                    .serialize(RecordRow::from_record(r))
                    .map_err(|e| CorpusError::io(path, std::io::Error::other(e.to_string())))?;
            }
            writer.flush().map_err(|e| CorpusError::io(path, e))?;
        }
    }
    write_atomic(path, &buf).map_err(|e| CorpusError::io(path, e))
}

/// Replaces `path` with `contents` via a temporary file and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// 700 manual records, 100 per category, 490/70/140.
    Base,
    /// 2,450/350/140 with manual-only test and resolvable sources.
    Augmented,
    None,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Profile::Base),
            "augmented" => Ok(Profile::Augmented),
            "none" => Ok(Profile::None),
            other => Err(format!("unknown profile {other:?}")),
        }
    }
}

pub const BASE_TOTAL: usize = 700;
pub const BASE_PER_CATEGORY: usize = 100;
pub const BASE_SPLIT_SIZES: [usize; 3] = [490, 70, 140];
pub const AUGMENTED_SPLIT_SIZES: [usize; 3] = [2450, 350, 140];

/// Collected violations; empty means the dataset is valid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, msg: impl Into<String>) {
        self.violations.push(msg.into());
    }
}

pub fn validate_dataset(d: &Dataset, profile: Profile) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut ids = HashSet::new();
    for r in &d.records {
        if r.id.is_empty() {
            report.push("record with empty id");
        }
        if !ids.insert(r.id.as_str()) {
            report.push(format!("duplicate id {:?}", r.id));
        }
        if r.text.trim().is_empty() {
            report.push(format!("record {:?} has empty text", r.id));
        }
    }

    let by_id: HashMap<&str, &SentenceRecord> =
        d.records.iter().map(|r| (r.id.as_str(), r)).collect();
    for r in &d.records {
        match (r.provenance, &r.source_id) {
            (Provenance::Synthetic, None) => {
                report.push(format!("synthetic record {:?} has no source_id", r.id))
            }
            (Provenance::Synthetic, Some(src)) => match by_id.get(src.as_str()) {
                None => report.push(format!(
                    "synthetic record {:?} references missing source {src:?}",
                    r.id
                )),
                Some(source) => {
                    if source.provenance != Provenance::Manual {
                        report.push(format!(
                            "synthetic record {:?} references non-manual source {src:?}",
                            r.id
                        ));
                    }
                    if source.label != r.label {
                        report.push(format!(
                            "synthetic record {:?} label differs from source {src:?}",
                            r.id
                        ));
                    }
                    if source.split != r.split {
                        report.push(format!(
                            "synthetic record {:?} split differs from source {src:?}",
                            r.id
                        ));
                    }
                }
            },
            (Provenance::Manual, Some(_)) => {
                report.push(format!("manual record {:?} has a source_id", r.id))
            }
            (Provenance::Manual, None) => {}
        }
        if r.provenance == Provenance::Synthetic && r.split == Some(Split::Test) {
            report.push(format!("synthetic record in test split: {:?}", r.id));
        }
    }

    if profile == Profile::None {
        return report;
    }

    let unassigned = d.records.iter().filter(|r| r.split.is_none()).count();
    if unassigned > 0 {
        report.push(format!("{unassigned} records have no split assigned"));
    }
    let counts = d.split_counts();
    let expected = match profile {
        Profile::Base => BASE_SPLIT_SIZES,
        _ => AUGMENTED_SPLIT_SIZES,
    };
    for (split, want) in Split::ALL.iter().zip(expected) {
        let got = counts.get(split).copied().unwrap_or(0);
        if got != want {
            report.push(format!("{split} split has {got} records, expected {want}"));
        }
    }

    let manual: Vec<&SentenceRecord> = d
        .records
        .iter()
        .filter(|r| r.provenance == Provenance::Manual)
        .collect();
    match profile {
        Profile::Base => {
            if d.len() != BASE_TOTAL {
                report.push(format!(
                    "dataset has {} records, expected {BASE_TOTAL}",
                    d.len()
                ));
            }
            if manual.len() != d.len() {
                report.push(format!(
                    "base dataset contains {} synthetic records",
                    d.len() - manual.len()
                ));
            }
            let mut per_cat = [0usize; NUM_CATEGORIES];
            for r in &d.records {
                per_cat[r.label.index()] += 1;
            }
            for c in all_categories() {
                let got = per_cat[c.index()];
                if got != BASE_PER_CATEGORY {
                    report.push(format!(
                        "category {c} has {got} records, expected {BASE_PER_CATEGORY}"
                    ));
                }
            }
        }
        Profile::Augmented => {
            let test_manual = manual
                .iter()
                .filter(|r| r.split == Some(Split::Test))
                .count();
            if test_manual != AUGMENTED_SPLIT_SIZES[2] {
                report.push(format!(
                    "test split has {test_manual} manual records, expected {}",
                    AUGMENTED_SPLIT_SIZES[2]
                ));
            }
        }
        Profile::None => unreachable!(),
    }
    report
}

/// Fractions of records sent to train, validation and test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let r = self.as_array();
        let ok = r.iter().all(|x| x.is_finite() && *x >= 0.0)
            && (r.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(CorpusError::InvalidRatios(r))
        }
    }
}

/// Largest-remainder apportionment of `n` items; ties go to the earlier
/// slot (train before validation before test).
pub fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    // Quotas are snapped to 1e-9 so that 0.7 * 10 = 7.000000000000001 does
    // not count as a remainder.
    let quotas = ratios.map(|r| ((r * n as f64) * 1e9).round() / 1e9);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &slot in order.iter().take(n.saturating_sub(assigned)) {
        counts[slot] += 1;
    }
    counts
}

fn category_seed(seed: u64, category: Category) -> u64 {
    // splitmix64 finalizer over the combined seed
    let mut z = seed ^ ((category.index() as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Assigns splits within each category independently.
///
/// Records of a category are sorted by id, shuffled with a generator seeded
/// from `(seed, category)`, and cut according to [`apportion`]. Only the
/// `split` fields change; record order is preserved.
pub fn stratified_split(
    d: &Dataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Dataset, CorpusError> {
    ratios.validate()?;
    let mut by_category: Vec<Vec<usize>> = vec![Vec::new(); NUM_CATEGORIES];
    for (i, r) in d.records.iter().enumerate() {
        by_category[r.label.index()].push(i);
    }
    let mut out = d.clone();
    for c in all_categories() {
        let members = &mut by_category[c.index()];
        if members.is_empty() {
            return Err(CorpusError::EmptyCategory(c));
        }
        members.sort_by(|&a, &b| d.records[a].id.cmp(&d.records[b].id));
        let mut rng = ChaCha8Rng::seed_from_u64(category_seed(seed, c));
        members.shuffle(&mut rng);
        let [n_train, n_val, _] = apportion(members.len(), ratios.as_array());
        for (pos, &idx) in members.iter().enumerate() {
            let split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
            out.records[idx].split = Some(split);
        }
    }
    Ok(out)
}
