//! Paraphrase-based augmentation with an edit-distance diversity gate.
//!
//! Every manual train/validation sentence receives `variants_per_sentence`
//! paraphrases from a backend. A candidate is kept only if its normalized
//! Levenshtein distance to the original, and its mean distance to the
//! already accepted siblings, are both strictly above `min_distance`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, GenerationRequest};
use crate::classify::parallel_map;
use crate::corpus::{Dataset, Provenance, SentenceRecord, Split};
use crate::schema::{all_categories, Category, NUM_CATEGORIES};

pub const DEFAULT_AUGMENT_TEMPLATE: &str = include_str!("../templates/augment_prompt.txt");
pub const CATEGORY_PLACEHOLDER: &str = "{{CATEGORY}}";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("synthetic record {0:?} references a missing source")]
    DanglingSource(String),
    #[error("record {0:?} is not a manual record")]
    NotManual(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

/// Levenshtein distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let prefix = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let (a, b) = (&a[prefix..], &b[prefix..]);
    let suffix = a
        .iter()
        .rev()
        .zip(b.iter().rev())
        .take_while(|(x, y)| x == y)
        .count();
    let (a, b) = (&a[..a.len() - suffix], &b[..b.len() - suffix]);
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }
    let mut row: Vec<usize> = (0..=short.len()).collect();
    for (i, lc) in long.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, sc) in short.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = if lc == sc {
                diag
            } else {
                1 + diag.min(above).min(row[j])
            };
            diag = above;
        }
    }
    row[short.len()]
}

/// Edit distance divided by the longer length; 0 for two empty strings.
pub fn normalized_levenshtein(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        0.0
    } else {
        levenshtein(a, b) as f64 / longest as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub variants_per_sentence: usize,
    pub min_distance: f64,
    pub max_regeneration_attempts: u32,
    /// Prompt with `{{SENTENCE}}` and `{{CATEGORY}}` placeholders.
    pub generation_template: String,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            variants_per_sentence: 4,
            min_distance: 0.20,
            max_regeneration_attempts: 5,
            generation_template: DEFAULT_AUGMENT_TEMPLATE.to_string(),
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::InvalidPolicy(m.into()));
        if self.variants_per_sentence == 0 {
            return bad("variants_per_sentence must be positive");
        }
        if !(self.min_distance > 0.0 && self.min_distance < 1.0) {
            return bad("min_distance must lie in (0, 1)");
        }
        if self.max_regeneration_attempts == 0 {
            return bad("max_regeneration_attempts must be positive");
        }
        if !self.generation_template.contains(crate::classify::SENTENCE_PLACEHOLDER) {
            return bad("generation template lacks {{SENTENCE}}");
        }
        Ok(())
    }

    pub fn render(&self, sentence: &str, category: Category) -> String {
        // category first so that sentence text is never rescanned
        self.generation_template
            .replace(CATEGORY_PLACEHOLDER, category.canonical_name())
            .replacen(crate::classify::SENTENCE_PLACEHOLDER, sentence, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateOutcome {
    Pass,
    Fail(GateFailure),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum GateFailure {
    ToOriginal(f64),
    MeanToSiblings(f64),
}

/// Strict gate: both distances must exceed `policy.min_distance`.
pub fn gate_variant(
    original: &str,
    candidate: &str,
    siblings: &[&str],
    policy: &AugmentationPolicy,
) -> GateOutcome {
    let to_original = normalized_levenshtein(original, candidate);
    if to_original <= policy.min_distance {
        return GateOutcome::Fail(GateFailure::ToOriginal(to_original));
    }
    if let Some(mean) = mean_distance(candidate, siblings) {
        if mean <= policy.min_distance {
            return GateOutcome::Fail(GateFailure::MeanToSiblings(mean));
        }
    }
    GateOutcome::Pass
}

fn mean_distance(text: &str, others: &[&str]) -> Option<f64> {
    if others.is_empty() {
        None
    } else {
        Some(
            others
                .iter()
                .map(|o| normalized_levenshtein(text, o))
                .sum::<f64>()
                / others.len() as f64,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub text: String,
    pub to_original: f64,
    /// `None` when the set has a single variant.
    pub mean_to_siblings: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantStatus {
    Complete,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSet {
    pub source_id: String,
    pub variants: Vec<Variant>,
    pub attempts_used: u32,
    pub status: VariantStatus,
    /// Backend errors seen while generating, one entry per failed attempt.
    pub errors: Vec<String>,
}

fn final_distances(original: &str, texts: &[String]) -> Vec<Variant> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let siblings: Vec<&str> = texts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, s)| s.as_str())
                .collect();
            Variant {
                text: t.clone(),
                to_original: normalized_levenshtein(original, t),
                mean_to_siblings: mean_distance(t, &siblings),
            }
        })
        .collect()
}

/// Generates paraphrases for one manual record.
///
/// Slots are filled in order; each slot may use up to
/// `max_regeneration_attempts` backend calls. Once the set is full it is
/// re-checked as a whole (each variant against the original and the mean of
/// all its co-variants); the latest variant failing that check is dropped and
/// its slot reopened. A slot that runs out of attempts ends the set as
/// `Exhausted`, keeping what was accepted.
pub fn generate_variant_set(
    record: &SentenceRecord,
    backend: &dyn Backend,
    policy: &AugmentationPolicy,
) -> Result<VariantSet, AugmentError> {
    if record.provenance != Provenance::Manual {
        return Err(AugmentError::NotManual(record.id.clone()));
    }
    policy.validate()?;
    let prompt = policy.render(&record.text, record.label);
    let target = policy.variants_per_sentence;
    let mut accepted: Vec<String> = Vec::with_capacity(target);
    let mut slot_attempts = vec![0u32; target];
    let mut attempts_used = 0u32;
    let mut errors = Vec::new();

    let status = 'outer: loop {
        while accepted.len() < target {
            let slot = accepted.len();
            loop {
                if slot_attempts[slot] >= policy.max_regeneration_attempts {
                    break 'outer VariantStatus::Exhausted;
                }
                slot_attempts[slot] += 1;
                let request = GenerationRequest::keyed(prompt.clone(), record.id.clone(), attempts_used);
                attempts_used += 1;
                let candidate = match backend.generate(&request) {
                    Ok(r) => r.text.trim().to_string(),
                    Err(e) => {
                        errors.push(e.to_string());
                        continue;
                    }
                };
                let siblings: Vec<&str> = accepted.iter().map(String::as_str).collect();
                if gate_variant(&record.text, &candidate, &siblings, policy) == GateOutcome::Pass {
                    accepted.push(candidate);
                    break;
                }
            }
        }
        let checked = final_distances(&record.text, &accepted);
        let failing = checked.iter().rposition(|v| {
            v.to_original <= policy.min_distance
                || v.mean_to_siblings.is_some_and(|m| m <= policy.min_distance)
        });
        match failing {
            None => break VariantStatus::Complete,
            Some(i) => {
                accepted.remove(i);
            }
        }
    };

    Ok(VariantSet {
        source_id: record.id.clone(),
        variants: final_distances(&record.text, &accepted),
        attempts_used,
        status,
        errors,
    })
}

/// Summary written next to an augmented dataset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CompletionReport {
    pub sources: usize,
    pub complete: usize,
    pub exhausted: usize,
    pub exhausted_ids: Vec<String>,
    pub new_records: usize,
    pub new_by_split: BTreeMap<String, usize>,
    /// attempts used per source -> number of sources
    pub attempts_histogram: BTreeMap<u32, usize>,
    pub backend_errors: usize,
}

pub fn synthetic_id(source_id: &str, n: usize) -> String {
    format!("{source_id}#v{n}")
}

/// Adds accepted paraphrases of every manual train/validation record as
/// synthetic records with the same label and split. Test records and
/// existing records are copied unchanged.
pub fn augment_dataset(
    d: &Dataset,
    backend: &dyn Backend,
    policy: &AugmentationPolicy,
    concurrency: usize,
) -> Result<(Dataset, CompletionReport), AugmentError> {
    policy.validate()?;
    let sources: Vec<&SentenceRecord> = d
        .records
        .iter()
        .filter(|r| {
            r.provenance == Provenance::Manual
                && matches!(r.split, Some(Split::Train) | Some(Split::Validation))
        })
        .collect();

    let sets = parallel_map(sources.len(), concurrency, |i| {
        generate_variant_set(sources[i], backend, policy)
    });

    let mut report = CompletionReport {
        sources: sources.len(),
        ..Default::default()
    };
    let mut out = d.clone();
    for (src, set) in sources.iter().zip(sets) {
        let set = set?;
        match set.status {
            VariantStatus::Complete => report.complete += 1,
            VariantStatus::Exhausted => {
                report.exhausted += 1;
                report.exhausted_ids.push(src.id.clone());
            }
        }
        *report.attempts_histogram.entry(set.attempts_used).or_insert(0) += 1;
        report.backend_errors += set.errors.len();
        for (n, v) in set.variants.into_iter().enumerate() {
            out.records.push(SentenceRecord {
                id: synthetic_id(&src.id, n + 1),
                text: v.text,
                label: src.label,
                split: src.split,
                provenance: Provenance::Synthetic,
                source_id: Some(src.id.clone()),
            });
            report.new_records += 1;
            *report
                .new_by_split
                .entry(src.split.map_or("none", Split::as_str).to_string())
                .or_insert(0) += 1;
        }
    }
    Ok((out, report))
}

/// Re-runs the gate over every synthetic record of `d`: each variant against
/// its source and the mean over its co-variants. Returns the ids that fail.
pub fn verify_synthetic(d: &Dataset, policy: &AugmentationPolicy) -> Result<Vec<String>, AugmentError> {
    let mut failing = Vec::new();
    for group in group_variants(d)? {
        for (i, v) in group.variants.iter().enumerate() {
            let siblings: Vec<&str> = group
                .variants
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, s)| s.text.as_str())
                .collect();
            if gate_variant(&group.source.text, &v.text, &siblings, policy) != GateOutcome::Pass {
                failing.push(v.id.clone());
            }
        }
    }
    Ok(failing)
}

struct VariantGroup<'a> {
    source: &'a SentenceRecord,
    /// Ordered by variant index.
    variants: Vec<&'a SentenceRecord>,
}

fn variant_index(r: &SentenceRecord) -> Option<usize> {
    let src = r.source_id.as_deref()?;
    r.id.strip_prefix(src)?.strip_prefix("#v")?.parse().ok()
}

fn group_variants(d: &Dataset) -> Result<Vec<VariantGroup<'_>>, AugmentError> {
    let by_id: HashMap<&str, &SentenceRecord> =
        d.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut groups: Vec<VariantGroup<'_>> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for r in d.records.iter().filter(|r| r.provenance == Provenance::Synthetic) {
        let src_id = r
            .source_id
            .as_deref()
            .ok_or_else(|| AugmentError::DanglingSource(r.id.clone()))?;
        let source = by_id
            .get(src_id)
            .ok_or_else(|| AugmentError::DanglingSource(r.id.clone()))?;
        let g = *index.entry(src_id).or_insert_with(|| {
            groups.push(VariantGroup {
                source,
                variants: Vec::new(),
            });
            groups.len() - 1
        });
        groups[g].variants.push(r);
    }
    for g in &mut groups {
        // numbered ids first, by number; anything else keeps dataset order
        g.variants
            .sort_by_key(|r| variant_index(r).unwrap_or(usize::MAX));
    }
    Ok(groups)
}

/// Mean distances for one (split, category) cell group, per variant index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityRow {
    pub split: Split,
    /// `None` for the Average row.
    pub category: Option<Category>,
    /// `(to_original, to_other_averaged)` for variant 1..=n; `None` when no
    /// source in the group has that many variants.
    pub cells: Vec<(Option<f64>, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub variants: usize,
    pub rows: Vec<SimilarityRow>,
    pub band: (f64, f64),
    /// Cells outside `band`, as `split/category/column` labels.
    pub out_of_band: Vec<String>,
}

impl SimilarityReport {
    pub fn within_band(&self) -> bool {
        self.out_of_band.is_empty()
    }

    /// Data Type, Category, then SynN-Original / SynN-Other Averaged pairs,
    /// two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Data Type,Category");
        for n in 1..=self.variants {
            let _ = write!(out, ",Syn{n}-Original,Syn{n}-Other Averaged");
        }
        out.push('\n');
        for row in &self.rows {
            let split = match row.split {
                Split::Train => "Training",
                Split::Validation => "Validation",
                Split::Test => "Test",
            };
            out.push_str(split);
            out.push(',');
            out.push_str(row.category.map_or("Average", Category::canonical_name));
            for (a, b) in &row.cells {
                for v in [a, b] {
                    out.push(',');
                    if let Some(v) = v {
                        let _ = write!(out, "{v:.2}");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Expected magnitude band for regenerated similarity tables.
pub const DEFAULT_SIMILARITY_BAND: (f64, f64) = (0.45, 0.70);

/// Per split and category, the mean distance of variant n to its original
/// and the mean of its average distance to the other variants of the same
/// source. The Average row pools every source in the split.
pub fn similarity_report(d: &Dataset, band: (f64, f64)) -> Result<SimilarityReport, AugmentError> {
    let groups = group_variants(d)?;
    let variants = groups.iter().map(|g| g.variants.len()).max().unwrap_or(0);

    #[derive(Default, Clone)]
    struct Acc {
        sum: f64,
        n: usize,
    }
    impl Acc {
        fn add(&mut self, v: f64) {
            self.sum += v;
            self.n += 1;
        }
        fn mean(&self) -> Option<f64> {
            (self.n > 0).then(|| self.sum / self.n as f64)
        }
    }
    // [split][category or 7 = all][variant] -> (to_original, to_others)
    let mut acc = vec![vec![vec![(Acc::default(), Acc::default()); variants]; NUM_CATEGORIES + 1]; 2];

    for g in &groups {
        let split_idx = match g.source.split {
            Some(Split::Train) => 0,
            Some(Split::Validation) => 1,
            _ => continue,
        };
        let texts: Vec<&str> = g.variants.iter().map(|r| r.text.as_str()).collect();
        for (n, text) in texts.iter().enumerate() {
            let to_original = normalized_levenshtein(&g.source.text, text);
            let others: Vec<&str> = texts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != n)
                .map(|(_, t)| *t)
                .collect();
            let to_others = mean_distance(text, &others);
            for c in [g.source.label.index(), NUM_CATEGORIES] {
                let cell = &mut acc[split_idx][c][n];
                cell.0.add(to_original);
                if let Some(v) = to_others {
                    cell.1.add(v);
                }
            }
        }
    }

    let mut rows = Vec::new();
    let mut out_of_band = Vec::new();
    for (split_idx, split) in [Split::Train, Split::Validation].into_iter().enumerate() {
        let order = std::iter::once(None).chain(all_categories().into_iter().map(Some));
        for category in order {
            let c = category.map_or(NUM_CATEGORIES, Category::index);
            let cells: Vec<_> = acc[split_idx][c]
                .iter()
                .map(|(a, b)| (a.mean(), b.mean()))
                .collect();
            if cells.iter().all(|(a, b)| a.is_none() && b.is_none()) {
                continue;
            }
            for (n, (a, b)) in cells.iter().enumerate() {
                for (v, kind) in [(a, "Original"), (b, "Other Averaged")] {
                    if let Some(v) = v {
                        if *v < band.0 || *v > band.1 {
                            out_of_band.push(format!(
                                "{split}/{}/Syn{}-{kind}",
                                category.map_or("Average", Category::canonical_name),
                                n + 1
                            ));
                        }
                    }
                }
            }
            rows.push(SimilarityRow {
                split,
                category,
                cells,
            });
        }
    }
    Ok(SimilarityReport {
        variants,
        rows,
        band,
        out_of_band,
    })
}
