//! Confusion matrices, precision/recall/F1 and run comparisons.
//!
//! Rows of a [`ConfusionMatrix`] are gold categories; columns are the seven
//! predicted categories followed by an `unparsed` column. Unparsed answers
//! therefore lower recall of their gold category but never enter any
//! precision denominator. Empty ratios (0/0) are defined as 0.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::ClassificationRun;
use crate::corpus::{Dataset, Split};
use crate::schema::{all_categories, Category, NUM_CATEGORIES};

/// Index of the unparsed column.
pub const UNPARSED_COL: usize = NUM_CATEGORIES;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("gold has {gold} items but predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("no gold labels")]
    Empty,
    #[error("missing category {0}")]
    MissingCategory(Category),
    #[error("reports are over different splits ({0} vs {1})")]
    SplitMismatch(Split, Split),
    #[error("run and dataset disagree on sentence ids: {0}")]
    IdMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[gold][predicted]`, predicted index 7 meaning unparsed.
    pub counts: [[u64; NUM_CATEGORIES + 1]; NUM_CATEGORIES],
}

impl ConfusionMatrix {
    pub fn get(&self, gold: Category, predicted: Option<Category>) -> u64 {
        self.counts[gold.index()][predicted.map_or(UNPARSED_COL, Category::index)]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, gold: Category) -> u64 {
        self.counts[gold.index()].iter().sum()
    }

    pub fn column_sum(&self, predicted: Category) -> u64 {
        self.counts.iter().map(|row| row[predicted.index()]).sum()
    }

    pub fn unparsed(&self) -> u64 {
        self.counts.iter().map(|row| row[UNPARSED_COL]).sum()
    }

    /// Off-diagonal cells, unparsed included.
    pub fn errors(&self) -> u64 {
        self.total() - all_categories().iter().map(|&c| self.get(c, Some(c))).sum::<u64>()
    }

    /// Gold rows by predicted columns, with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gold\\predicted");
        for c in all_categories() {
            out.push(',');
            out.push_str(c.canonical_name());
        }
        out.push_str(",Unparsed\n");
        for c in all_categories() {
            out.push_str(c.canonical_name());
            for v in self.counts[c.index()] {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Heatmap of the matrix as a standalone SVG document.
    pub fn to_svg(&self, title: &str) -> String {
        const CELL: usize = 56;
        const LEFT: usize = 120;
        const TOP: usize = 110;
        let cols = NUM_CATEGORIES + 1;
        let width = LEFT + cols * CELL + 20;
        let height = TOP + NUM_CATEGORIES * CELL + 40;
        let max = self.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
        let col_names: Vec<&str> = all_categories()
            .iter()
            .map(|c| c.canonical_name())
            .chain(std::iter::once("Unparsed"))
            .collect();

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
            width / 2,
            xml_escape(title)
        );
        for (j, name) in col_names.iter().enumerate() {
            let x = LEFT + j * CELL + CELL / 2;
            let _ = writeln!(
                svg,
                r#"<text x="{x}" y="{}" text-anchor="start" transform="rotate(-45 {x} {})">{name}</text>"#,
                TOP - 6,
                TOP - 6
            );
        }
        for (i, gold) in all_categories().iter().enumerate() {
            let y = TOP + i * CELL;
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                LEFT - 6,
                y + CELL / 2 + 4,
                gold.canonical_name()
            );
            for j in 0..cols {
                let v = self.counts[i][j];
                let shade = 255 - ((v as f64 / max) * 200.0).round() as u8;
                let x = LEFT + j * CELL;
                let _ = writeln!(
                    svg,
                    r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)" stroke="#888"/>"##
                );
                let _ = writeln!(
                    svg,
                    r#"<text x="{}" y="{}" text-anchor="middle">{v}</text>"#,
                    x + CELL / 2,
                    y + CELL / 2 + 4
                );
            }
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">predicted</text>"#,
            LEFT + cols * CELL / 2,
            height - 10
        );
        svg.push_str("</svg>\n");
        svg
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tallies `(gold, predicted)` pairs; `None` predictions land in the
/// unparsed column.
pub fn confusion(
    gold: &[Category],
    pred: &[Option<Category>],
) -> Result<ConfusionMatrix, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut m = ConfusionMatrix::default();
    for (g, p) in gold.iter().zip(pred) {
        m.counts[g.index()][p.map_or(UNPARSED_COL, Category::index)] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        Prf {
            precision,
            recall,
            f1: harmonic_mean(precision, recall),
        }
    }

    fn map2(self, other: Prf, f: impl Fn(f64, f64) -> f64) -> Prf {
        Prf {
            precision: f(self.precision, other.precision),
            recall: f(self.recall, other.recall),
            f1: f(self.f1, other.f1),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub type CategoryScores = BTreeMap<Category, Prf>;

pub fn per_category_prf(m: &ConfusionMatrix) -> CategoryScores {
    all_categories()
        .iter()
        .map(|&c| {
            let tp = m.get(c, Some(c));
            (c, Prf::new(ratio(tp, m.column_sum(c)), ratio(tp, m.row_sum(c))))
        })
        .collect()
}

/// Unweighted mean over the seven categories, each component separately.
/// The macro F1 is the mean of per-category F1 values, not the harmonic
/// mean of macro precision and recall.
pub fn macro_average(scores: &CategoryScores) -> Result<Prf, MetricsError> {
    let mut sum = Prf::default();
    for c in all_categories() {
        let s = scores.get(&c).ok_or(MetricsError::MissingCategory(c))?;
        sum = sum.map2(*s, |a, b| a + b);
    }
    let n = NUM_CATEGORIES as f64;
    Ok(Prf {
        precision: sum.precision / n,
        recall: sum.recall / n,
        f1: sum.f1 / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub split: Split,
    pub matrix: ConfusionMatrix,
    pub per_category: CategoryScores,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    pub unparsed_count: u64,
}

impl EvalReport {
    pub fn from_matrix(run_id: impl Into<String>, split: Split, matrix: ConfusionMatrix) -> Self {
        let per_category = per_category_prf(&matrix);
        let macro_avg = macro_average(&per_category).expect("all categories present");
        EvalReport {
            run_id: run_id.into(),
            split,
            unparsed_count: matrix.unparsed(),
            matrix,
            per_category,
            macro_avg,
        }
    }

    /// A report built from published per-category scores, with an empty
    /// matrix. Useful for comparing against numbers without raw predictions.
    pub fn from_scores(
        run_id: impl Into<String>,
        split: Split,
        per_category: CategoryScores,
    ) -> Result<Self, MetricsError> {
        let macro_avg = macro_average(&per_category)?;
        Ok(EvalReport {
            run_id: run_id.into(),
            split,
            matrix: ConfusionMatrix::default(),
            per_category,
            macro_avg,
            unparsed_count: 0,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    /// Average row first, then one row per category, values to 3 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,precision,recall,f1\n");
        let mut row = |name: &str, s: &Prf| {
            let _ = writeln!(
                out,
                "{name},{:.3},{:.3},{:.3}",
                s.precision, s.recall, s.f1
            );
        };
        row("Average", &self.macro_avg);
        for (c, s) in &self.per_category {
            row(c.canonical_name(), s);
        }
        out
    }
}

/// Gold labels and predictions of `run`, aligned by sentence id.
pub fn align_run(
    run: &ClassificationRun,
    dataset: &Dataset,
    split: Split,
) -> Result<(Vec<Category>, Vec<Option<Category>>), MetricsError> {
    let gold: HashMap<&str, Category> = dataset
        .split_records(split)
        .into_iter()
        .map(|r| (r.id.as_str(), r.label))
        .collect();
    if run.predictions.len() != gold.len() {
        return Err(MetricsError::IdMismatch(format!(
            "run has {} predictions, {split} split has {} sentences",
            run.predictions.len(),
            gold.len()
        )));
    }
    let mut golds = Vec::with_capacity(gold.len());
    let mut preds = Vec::with_capacity(gold.len());
    let mut seen = std::collections::HashSet::new();
    for p in &run.predictions {
        let g = gold.get(p.sentence_id.as_str()).ok_or_else(|| {
            MetricsError::IdMismatch(format!(
                "sentence {:?} is not in the {split} split",
                p.sentence_id
            ))
        })?;
        if !seen.insert(p.sentence_id.as_str()) {
            return Err(MetricsError::IdMismatch(format!(
                "sentence {:?} predicted twice",
                p.sentence_id
            )));
        }
        golds.push(*g);
        preds.push(p.predicted);
    }
    Ok((golds, preds))
}

pub fn evaluate_run(
    run: &ClassificationRun,
    dataset: &Dataset,
    split: Split,
) -> Result<EvalReport, MetricsError> {
    let (gold, pred) = align_run(run, dataset, split)?;
    Ok(EvalReport::from_matrix(
        run.manifest.run_id.clone(),
        split,
        confusion(&gold, &pred)?,
    ))
}

/// `b - a`, per category and macro.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub baseline: String,
    pub candidate: String,
    pub per_category: CategoryScores,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
}

impl RunComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,precision_diff,recall_diff,f1_diff\n");
        let mut row = |name: &str, s: &Prf| {
            let _ = writeln!(
                out,
                "{name},{:.3},{:.3},{:.3}",
                s.precision, s.recall, s.f1
            );
        };
        row("Average", &self.macro_avg);
        for (c, s) in &self.per_category {
            row(c.canonical_name(), s);
        }
        out
    }
}

pub fn compare_runs(a: &EvalReport, b: &EvalReport) -> Result<RunComparison, MetricsError> {
    if a.split != b.split {
        return Err(MetricsError::SplitMismatch(a.split, b.split));
    }
    let mut per_category = CategoryScores::new();
    for c in all_categories() {
        let sa = a.per_category.get(&c).ok_or(MetricsError::MissingCategory(c))?;
        let sb = b.per_category.get(&c).ok_or(MetricsError::MissingCategory(c))?;
        per_category.insert(c, sb.map2(*sa, |x, y| x - y));
    }
    Ok(RunComparison {
        baseline: a.run_id.clone(),
        candidate: b.run_id.clone(),
        per_category,
        macro_avg: b.macro_avg.map2(a.macro_avg, |x, y| x - y),
    })
}
