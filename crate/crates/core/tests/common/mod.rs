//! Fixture builders and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scisent::backend::{MockFixtures, MockResponse};
use scisent::corpus::{stratified_split, Dataset, SentenceRecord, Split, SplitRatios};
use scisent::schema::{all_categories, Category};

const WORDS: &[&str] = &[
    "model", "approach", "corpus", "study", "proposed", "authors", "evaluation", "neural",
    "citation", "method", "results", "show", "however", "limited", "dataset", "extend",
    "retrieval", "summaries", "annotated", "baseline", "improves", "accuracy", "domain",
    "prior", "work", "framework", "transformer", "sentences", "scientific", "papers",
    "analysis", "classification", "features", "learning", "recent", "several", "task",
];

pub fn sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(8..20);
    let mut words: Vec<&str> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
    words[0] = "Recent";
    let mut s = words.join(" ");
    s.push('.');
    s
}

/// `per_category` records of each category with no split assigned.
pub fn balanced_dataset(per_category: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut n = 0;
    for c in all_categories() {
        for _ in 0..per_category {
            n += 1;
            let text = format!("{} (#{n})", sentence(&mut rng));
            records.push(SentenceRecord::manual(format!("s{n:04}"), text, c));
        }
    }
    Dataset::new("base", records)
}

/// The 700-sentence benchmark shape, split 490/70/140.
pub fn base_benchmark() -> Dataset {
    stratified_split(&balanced_dataset(100, 7), SplitRatios::default(), 42).unwrap()
}

/// Full-matrix edit distance over chars, with no shortcuts.
pub fn levenshtein_oracle(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut m = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in m.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in m[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = m[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            m[i][j] = sub.min(m[i - 1][j] + 1).min(m[i][j - 1] + 1);
        }
    }
    m[a.len()][b.len()]
}

pub fn normalized_oracle(a: &str, b: &str) -> f64 {
    let n = a.chars().count().max(b.chars().count());
    if n == 0 {
        0.0
    } else {
        levenshtein_oracle(a, b) as f64 / n as f64
    }
}

/// Strict-threshold gate evaluated with the oracle distance.
pub fn gate_oracle(original: &str, candidate: &str, siblings: &[&str], min: f64) -> bool {
    if normalized_oracle(original, candidate) <= min {
        return false;
    }
    if siblings.is_empty() {
        return true;
    }
    let mean = siblings.iter().map(|s| normalized_oracle(candidate, s)).sum::<f64>()
        / siblings.len() as f64;
    mean > min
}

/// For every manual train/validation record, a sequence of `variants`
/// paraphrases that clear the gate at `min` as a set.
pub fn paraphrase_fixtures(d: &Dataset, variants: usize, min: f64, seed: u64) -> MockFixtures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut responses = HashMap::new();
    for r in d
        .records
        .iter()
        .filter(|r| matches!(r.split, Some(Split::Train) | Some(Split::Validation)))
    {
        let texts = loop {
            let texts: Vec<String> = (0..variants).map(|_| sentence(&mut rng)).collect();
            let ok = (0..variants).all(|i| {
                let others: Vec<&str> = texts
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, t)| t.as_str())
                    .collect();
                let earlier: Vec<&str> = texts[..i].iter().map(String::as_str).collect();
                gate_oracle(&r.text, &texts[i], &others, min)
                    && gate_oracle(&r.text, &texts[i], &earlier, min)
            });
            if ok {
                break texts;
            }
        };
        responses.insert(r.id.clone(), MockResponse::Sequence(texts));
    }
    MockFixtures {
        strict: true,
        default: None,
        responses,
    }
}

/// Classification answers for `split`: the gold label, unless `override_fn`
/// supplies a different raw response for the record at that position.
pub fn classification_fixtures(
    d: &Dataset,
    split: Split,
    override_fn: impl Fn(usize, &SentenceRecord) -> Option<String>,
) -> MockFixtures {
    let mut responses = HashMap::new();
    for (i, r) in d.split_records(split).into_iter().enumerate() {
        let raw = override_fn(i, r)
            .unwrap_or_else(|| format!("CATEGORY: {}", r.label.canonical_name()));
        responses.insert(r.id.clone(), MockResponse::Fixed(raw));
    }
    MockFixtures {
        strict: true,
        default: None,
        responses,
    }
}

/// Precision, recall and F1 for one category by direct counting over the
/// label lists. Zero denominators give 0.
pub fn direct_prf(gold: &[Category], pred: &[Option<Category>], c: Category) -> (f64, f64, f64) {
    let mut tp = 0u64;
    let mut predicted = 0u64;
    let mut actual = 0u64;
    for (g, p) in gold.iter().zip(pred) {
        if *p == Some(c) {
            predicted += 1;
            if *g == c {
                tp += 1;
            }
        }
        if *g == c {
            actual += 1;
        }
    }
    let p = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
    let r = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Macro means over the seven categories, summed in category order.
pub fn direct_macro(gold: &[Category], pred: &[Option<Category>]) -> (f64, f64, f64) {
    let mut s = (0.0, 0.0, 0.0);
    for c in all_categories() {
        let (p, r, f) = direct_prf(gold, pred, c);
        s.0 += p;
        s.1 += r;
        s.2 += f;
    }
    (s.0 / 7.0, s.1 / 7.0, s.2 / 7.0)
}

/// Agreement statistics from explicit rater labels: observed agreement is
/// the share of agreeing ordered rater pairs per item, averaged over items.
/// Returns `(kappa, ac1)`, each `None` when its chance term is 1.
pub fn pairwise_agreement(counts: &[Vec<u32>]) -> (Option<f64>, Option<f64>) {
    let k = counts[0].len();
    let labels: Vec<Vec<usize>> = counts
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .flat_map(|(c, &n)| std::iter::repeat_n(c, n as usize))
                .collect()
        })
        .collect();
    let mut po = 0.0;
    for item in &labels {
        let (mut agree, mut pairs) = (0u64, 0u64);
        for (a, la) in item.iter().enumerate() {
            for (b, lb) in item.iter().enumerate() {
                if a != b {
                    pairs += 1;
                    agree += u64::from(la == lb);
                }
            }
        }
        po += agree as f64 / pairs as f64;
    }
    po /= labels.len() as f64;

    let total: usize = labels.iter().map(Vec::len).sum();
    let shares: Vec<f64> = (0..k)
        .map(|c| labels.iter().flatten().filter(|&&l| l == c).count() as f64 / total as f64)
        .collect();
    let pe_kappa: f64 = shares.iter().map(|p| p * p).sum();
    let pe_ac1: f64 = shares.iter().map(|p| p * (1.0 - p)).sum::<f64>() / (k as f64 - 1.0);
    let kappa = (pe_kappa != 1.0).then(|| (po - pe_kappa) / (1.0 - pe_kappa));
    let ac1 = (pe_ac1 != 1.0).then(|| (po - pe_ac1) / (1.0 - pe_ac1));
    (kappa, ac1)
}

pub fn random_counts(rng: &mut ChaCha8Rng, items: usize, raters: u32, k: usize) -> Vec<Vec<u32>> {
    (0..items)
        .map(|_| {
            let mut row = vec![0u32; k];
            for _ in 0..raters {
                row[rng.random_range(0..k)] += 1;
            }
            row
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An EvalReport assembled field by field from direct counts, for golden
/// comparisons against the CLI output.
pub fn oracle_report(
    run_id: &str,
    split: Split,
    gold: &[Category],
    pred: &[Option<Category>],
) -> scisent::metrics::EvalReport {
    let mut counts = [[0u64; 8]; 7];
    for (g, p) in gold.iter().zip(pred) {
        counts[g.index()][p.map_or(7, |c| c.index())] += 1;
    }
    let per_category = all_categories()
        .into_iter()
        .map(|c| {
            let (precision, recall, f1) = direct_prf(gold, pred, c);
            (c, scisent::metrics::Prf { precision, recall, f1 })
        })
        .collect();
    let (precision, recall, f1) = direct_macro(gold, pred);
    scisent::metrics::EvalReport {
        run_id: run_id.to_string(),
        split,
        matrix: scisent::metrics::ConfusionMatrix { counts },
        per_category,
        macro_avg: scisent::metrics::Prf { precision, recall, f1 },
        unparsed_count: pred.iter().filter(|p| p.is_none()).count() as u64,
    }
}

/// Raw response for the error pattern used by the end-to-end checks: every
/// seventh test sentence is answered with the next category, and one
/// sentence gets an answer naming no category.
pub fn patterned_response(i: usize, r: &SentenceRecord) -> Option<String> {
    if i == 50 {
        Some("I am not able to determine that.".to_string())
    } else if i % 7 == 3 {
        let next = Category::from_index((r.label.index() + 1) % 7).unwrap();
        Some(format!("CATEGORY: {}", next.canonical_name()))
    } else {
        None
    }
}

pub fn patterned_prediction(i: usize, r: &SentenceRecord) -> Option<Category> {
    if i == 50 {
        None
    } else if i % 7 == 3 {
        Category::from_index((r.label.index() + 1) % 7)
    } else {
        Some(r.label)
    }
}

pub fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}
