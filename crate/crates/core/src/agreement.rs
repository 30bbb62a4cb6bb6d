//! Multi-rater agreement: Fleiss' kappa and Gwet's AC1.
//!
//! Both statistics work on count rows: for each item, how many of the `n`
//! raters chose each category.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::schema::{all_categories, Category, NUM_CATEGORIES};

#[derive(Debug, Error)]
pub enum AgreementError {
    #[error("invalid rating matrix: {0}")]
    InvalidMatrix(String),
    #[error("expected agreement is 1; kappa is undefined")]
    DegenerateMarginals,
    #[error("chance agreement is 1; AC1 is undefined")]
    DegenerateChance,
    #[error("column {0} out of range")]
    NoSuchColumn(usize),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed ratings file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Item-by-category count rows, each summing to the number of raters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingMatrix {
    items: Vec<String>,
    raters: u32,
    counts: Vec<Vec<u32>>,
}

impl RatingMatrix {
    pub fn new(
        items: Vec<String>,
        raters: u32,
        counts: Vec<Vec<u32>>,
    ) -> Result<Self, AgreementError> {
        let bad = |m: String| Err(AgreementError::InvalidMatrix(m));
        if raters < 2 {
            return bad(format!("need at least 2 raters, got {raters}"));
        }
        if counts.is_empty() {
            return bad("no items".into());
        }
        if items.len() != counts.len() {
            return bad(format!("{} item ids for {} rows", items.len(), counts.len()));
        }
        let k = counts[0].len();
        if k < 2 {
            return bad(format!("need at least 2 categories, got {k}"));
        }
        for (id, row) in items.iter().zip(&counts) {
            if row.len() != k {
                return bad(format!("item {id:?} has {} columns, expected {k}", row.len()));
            }
            let sum: u32 = row.iter().sum();
            if sum != raters {
                return bad(format!("item {id:?} row sums to {sum}, expected {raters}"));
            }
        }
        Ok(RatingMatrix {
            items,
            raters,
            counts,
        })
    }

    /// Items named `0..N`.
    pub fn from_rows(raters: u32, counts: Vec<Vec<u32>>) -> Result<Self, AgreementError> {
        let items = (0..counts.len()).map(|i| i.to_string()).collect();
        Self::new(items, raters, counts)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn raters(&self) -> u32 {
        self.raters
    }

    pub fn counts(&self) -> &[Vec<u32>] {
        &self.counts
    }

    pub fn num_categories(&self) -> usize {
        self.counts[0].len()
    }

    /// Collapses to `{column, everything else}`.
    pub fn dichotomize(&self, column: usize) -> Result<RatingMatrix, AgreementError> {
        if column >= self.num_categories() {
            return Err(AgreementError::NoSuchColumn(column));
        }
        let counts = self
            .counts
            .iter()
            .map(|row| vec![row[column], self.raters - row[column]])
            .collect();
        Ok(RatingMatrix {
            items: self.items.clone(),
            raters: self.raters,
            counts,
        })
    }

    /// Mean over items of the share of agreeing ordered rater pairs.
    fn observed_agreement(&self) -> f64 {
        let n = self.raters as f64;
        let total: f64 = self
            .counts
            .iter()
            .map(|row| {
                let agreeing: f64 = row.iter().map(|&c| c as f64 * (c as f64 - 1.0)).sum();
                agreeing / (n * (n - 1.0))
            })
            .sum();
        total / self.counts.len() as f64
    }

    /// Mean over items of `n_iq / n` for each category.
    fn category_shares(&self) -> Vec<f64> {
        let n = self.raters as f64;
        let items = self.counts.len() as f64;
        (0..self.num_categories())
            .map(|q| self.counts.iter().map(|row| row[q] as f64).sum::<f64>() / (items * n))
            .collect()
    }
}

pub fn fleiss_kappa(r: &RatingMatrix) -> Result<f64, AgreementError> {
    let observed = r.observed_agreement();
    let expected: f64 = r.category_shares().iter().map(|p| p * p).sum();
    if expected == 1.0 {
        return Err(AgreementError::DegenerateMarginals);
    }
    Ok((observed - expected) / (1.0 - expected))
}

pub fn gwet_ac1_overall(r: &RatingMatrix) -> Result<f64, AgreementError> {
    let observed = r.observed_agreement();
    let k = r.num_categories() as f64;
    let chance =
        r.category_shares().iter().map(|p| p * (1.0 - p)).sum::<f64>() / (k - 1.0);
    if chance == 1.0 {
        return Err(AgreementError::DegenerateChance);
    }
    Ok((observed - chance) / (1.0 - chance))
}

/// AC1 of the one-vs-rest matrix for `column`.
pub fn gwet_ac1_per_category(r: &RatingMatrix, column: usize) -> Result<f64, AgreementError> {
    gwet_ac1_overall(&r.dichotomize(column)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    pub items: usize,
    pub raters: u32,
    pub fleiss_kappa: f64,
    pub gwet_ac1: f64,
    /// Keyed by category snake name, in column order.
    pub gwet_ac1_per_category: Vec<(String, f64)>,
}

/// All statistics for a matrix whose columns are the seven categories.
pub fn agreement_report(r: &RatingMatrix) -> Result<AgreementReport, AgreementError> {
    let mut per = Vec::with_capacity(r.num_categories());
    for (i, c) in all_categories().iter().enumerate().take(r.num_categories()) {
        per.push((c.snake_name().to_string(), gwet_ac1_per_category(r, i)?));
    }
    Ok(AgreementReport {
        items: r.items.len(),
        raters: r.raters,
        fleiss_kappa: fleiss_kappa(r)?,
        gwet_ac1: gwet_ac1_overall(r)?,
        gwet_ac1_per_category: per,
    })
}

fn read_csv(path: &Path) -> Result<csv::Reader<std::fs::File>, AgreementError> {
    let file = std::fs::File::open(path).map_err(|source| AgreementError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn malformed(e: csv::Error) -> AgreementError {
    AgreementError::Malformed {
        line: e.position().map_or(0, |p| p.line() as usize),
        reason: e.to_string(),
    }
}

/// Reads `item_id,rater_id,label` rows into a seven-column count matrix.
/// Items keep first-appearance order; every item needs the same number of
/// distinct raters.
pub fn load_raw_labels(path: &Path) -> Result<RatingMatrix, AgreementError> {
    let mut reader = read_csv(path)?;
    let headers = reader.headers().map_err(malformed)?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or(AgreementError::Malformed {
            line: 1,
            reason: format!("missing column {name:?}"),
        })
    };
    let (ci, cr, cl) = (col("item_id")?, col("rater_id")?, col("label")?);

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, (Vec<u32>, Vec<String>)> = HashMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(malformed)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        let (item, rater, label) = (field(ci), field(cr), field(cl));
        let cat: Category = label.parse().map_err(|e: crate::schema::SchemaError| {
            AgreementError::Malformed {
                line,
                reason: e.to_string(),
            }
        })?;
        let entry = rows.entry(item.clone()).or_insert_with(|| {
            order.push(item.clone());
            (vec![0; NUM_CATEGORIES], Vec::new())
        });
        if entry.1.contains(&rater) {
            return Err(AgreementError::Malformed {
                line,
                reason: format!("rater {rater:?} labelled item {item:?} twice"),
            });
        }
        entry.1.push(rater);
        entry.0[cat.index()] += 1;
    }
    let Some(first) = order.first() else {
        return Err(AgreementError::InvalidMatrix("no ratings".into()));
    };
    let raters = rows[first].1.len() as u32;
    let counts = order.iter().map(|i| rows[i].0.clone()).collect();
    RatingMatrix::new(order, raters, counts)
}

/// Reads `item_id` plus one count column per category. Category columns may
/// use canonical or snake names and appear in any order; missing categories
/// count as zero.
pub fn load_count_matrix(path: &Path) -> Result<RatingMatrix, AgreementError> {
    let mut reader = read_csv(path)?;
    let headers = reader.headers().map_err(malformed)?.clone();
    let mut item_col = None;
    let mut cat_cols = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if h == "item_id" {
            item_col = Some(i);
        } else {
            let c: Category = h.parse().map_err(|_| AgreementError::Malformed {
                line: 1,
                reason: format!("unknown column {h:?}"),
            })?;
            cat_cols.push((i, c));
        }
    }
    let item_col = item_col.ok_or(AgreementError::Malformed {
        line: 1,
        reason: "missing column \"item_id\"".into(),
    })?;
    let mut items = Vec::new();
    let mut counts = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(malformed)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let mut row = vec![0u32; NUM_CATEGORIES];
        for &(i, c) in &cat_cols {
            row[c.index()] = rec.get(i).unwrap_or("").parse().map_err(|e| {
                AgreementError::Malformed {
                    line,
                    reason: format!("bad count: {e}"),
                }
            })?;
        }
        items.push(rec.get(item_col).unwrap_or("").to_string());
        counts.push(row);
    }
    let raters = counts.first().map_or(0, |r| r.iter().sum());
    RatingMatrix::new(items, raters, counts)
}

/// Raw-label files are recognised by a `rater_id` column.
pub fn load_ratings(path: &Path) -> Result<RatingMatrix, AgreementError> {
    let mut reader = read_csv(path)?;
    let is_raw = reader
        .headers()
        .map_err(malformed)?
        .iter()
        .any(|h| h == "rater_id");
    if is_raw {
        load_raw_labels(path)
    } else {
        load_count_matrix(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked() -> RatingMatrix {
        RatingMatrix::from_rows(3, vec![vec![3, 0], vec![1, 2]]).unwrap()
    }

    #[test]
    fn worked_example() {
        // P = (1 + 1/3)/2 = 2/3; p = (4/6, 2/6) -> Pe = 5/9; kappa = 1/4
        assert!((fleiss_kappa(&worked()).unwrap() - 0.25).abs() < 1e-12);
        // Pe(gamma) = 2 * (2/3)(1/3) / 1 = 4/9; AC1 = (2/9)/(5/9) = 2/5
        assert!((gwet_ac1_overall(&worked()).unwrap() - 0.40).abs() < 1e-12);
        assert!((gwet_ac1_per_category(&worked(), 0).unwrap() - 0.40).abs() < 1e-12);
    }

    #[test]
    fn perfect_agreement_is_exactly_one() {
        let m = RatingMatrix::from_rows(
            3,
            vec![vec![3, 0, 0], vec![0, 3, 0], vec![0, 0, 3], vec![3, 0, 0]],
        )
        .unwrap();
        assert_eq!(fleiss_kappa(&m).unwrap(), 1.0);
        assert_eq!(gwet_ac1_overall(&m).unwrap(), 1.0);
        for c in 0..3 {
            assert_eq!(gwet_ac1_per_category(&m, c).unwrap(), 1.0);
        }
    }

    #[test]
    fn single_category_everywhere() {
        let m = RatingMatrix::from_rows(2, vec![vec![2, 0], vec![2, 0]]).unwrap();
        assert!(matches!(fleiss_kappa(&m), Err(AgreementError::DegenerateMarginals)));
        // AC1 stays defined: chance agreement is 0
        assert_eq!(gwet_ac1_overall(&m).unwrap(), 1.0);
    }

    #[test]
    fn invalid_matrices() {
        assert!(RatingMatrix::from_rows(1, vec![vec![1, 0]]).is_err());
        assert!(RatingMatrix::from_rows(3, vec![]).is_err());
        assert!(RatingMatrix::from_rows(3, vec![vec![3]]).is_err());
        assert!(RatingMatrix::from_rows(3, vec![vec![2, 0]]).is_err());
        assert!(RatingMatrix::from_rows(3, vec![vec![3, 0], vec![3, 0, 0]]).is_err());
        assert!(matches!(
            worked().dichotomize(2),
            Err(AgreementError::NoSuchColumn(2))
        ));
    }

    #[test]
    fn raw_and_count_files() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw.csv");
        std::fs::write(
            &raw,
            "item_id,rater_id,label\n\
             a,r1,Result\na,r2,result\na,r3,Result\n\
             b,r1,Other\nb,r2,Research Gap\nb,r3,research_gap\n",
        )
        .unwrap();
        let m = load_ratings(&raw).unwrap();
        assert_eq!(m.items(), ["a", "b"]);
        assert_eq!(m.raters(), 3);
        assert_eq!(m.counts()[0][Category::Result.index()], 3);
        assert_eq!(m.counts()[1][Category::ResearchGap.index()], 2);

        let counts = dir.path().join("counts.csv");
        std::fs::write(&counts, "item_id,result,Other,research_gap\na,3,0,0\nb,0,1,2\n").unwrap();
        assert_eq!(load_ratings(&counts).unwrap().counts(), m.counts());

        let dup = dir.path().join("dup.csv");
        std::fs::write(&dup, "item_id,rater_id,label\na,r1,Result\na,r1,Other\n").unwrap();
        assert!(matches!(
            load_raw_labels(&dup),
            Err(AgreementError::Malformed { line: 3, .. })
        ));

        let uneven = dir.path().join("uneven.csv");
        std::fs::write(&uneven, "item_id,rater_id,label\na,r1,Result\na,r2,Result\nb,r1,Other\n")
            .unwrap();
        assert!(matches!(
            load_raw_labels(&uneven),
            Err(AgreementError::InvalidMatrix(_))
        ));
    }

    #[test]
    fn report_covers_seven_categories() {
        let m = RatingMatrix::from_rows(
            2,
            all_categories()
                .iter()
                .map(|c| {
                    let mut row = vec![0; NUM_CATEGORIES];
                    row[c.index()] = 2;
                    row
                })
                .collect(),
        )
        .unwrap();
        let r = agreement_report(&m).unwrap();
        assert_eq!(r.fleiss_kappa, 1.0);
        assert_eq!(r.gwet_ac1_per_category.len(), 7);
        assert!(r.gwet_ac1_per_category.iter().all(|(_, v)| *v == 1.0));
    }
}
