//! Python bindings for the `scisent` core crate.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use scisent::agreement::{self, RatingMatrix};
use scisent::augment::{self, AugmentationPolicy, GateOutcome};
use scisent::classify::{self, PromptTemplate};
use scisent::corpus::{self, Format, Profile, SplitRatios};
use scisent::metrics;
use scisent::schema::{self, Category};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn category(name: &str) -> PyResult<Category> {
    name.parse::<Category>().map_err(value_err)
}

/// The seven category names in schema order.
#[pyfunction]
fn categories() -> Vec<&'static str> {
    schema::all_categories().iter().map(|c| c.canonical_name()).collect()
}

/// Canonical name for a label such as "research gap." or "Result".
#[pyfunction]
fn parse_label(text: &str) -> PyResult<&'static str> {
    schema::parse_label(text).map(Category::canonical_name).map_err(value_err)
}

/// Category named by a model response, or None.
#[pyfunction]
fn parse_response(raw: &str) -> Option<&'static str> {
    classify::parse_response(raw).0.map(Category::canonical_name)
}

/// Classification prompt for one sentence, from the bundled template or a file.
#[pyfunction]
#[pyo3(signature = (sentence, template_path=None))]
fn build_prompt(sentence: &str, template_path: Option<PathBuf>) -> PyResult<String> {
    let template = match template_path {
        None => PromptTemplate::default_template(),
        Some(p) => PromptTemplate::load(&p)
            .map_err(|e| PyIOError::new_err(format!("{}: {e}", p.display())))?
            .map_err(value_err)?,
    };
    Ok(classify::build_prompt(&template, sentence))
}

#[pyfunction]
fn normalized_levenshtein(a: &str, b: &str) -> f64 {
    augment::normalized_levenshtein(a, b)
}

/// True when `candidate` clears the diversity gate.
#[pyfunction]
#[pyo3(signature = (original, candidate, siblings=Vec::new(), min_distance=0.20))]
fn gate_variant(original: &str, candidate: &str, siblings: Vec<String>, min_distance: f64) -> bool {
    let policy = AugmentationPolicy {
        min_distance,
        ..AugmentationPolicy::default()
    };
    let sib: Vec<&str> = siblings.iter().map(String::as_str).collect();
    augment::gate_variant(original, candidate, &sib, &policy) == GateOutcome::Pass
}

fn matrix(counts: Vec<Vec<u32>>) -> PyResult<RatingMatrix> {
    let raters = counts.first().map_or(0, |r| r.iter().sum());
    RatingMatrix::from_rows(raters, counts).map_err(value_err)
}

/// Fleiss' kappa of an item-by-category count matrix.
#[pyfunction]
fn fleiss_kappa(counts: Vec<Vec<u32>>) -> PyResult<f64> {
    agreement::fleiss_kappa(&matrix(counts)?).map_err(value_err)
}

/// Gwet's AC1 of an item-by-category count matrix; with `column`, the
/// one-vs-rest AC1 of that category column.
#[pyfunction]
#[pyo3(signature = (counts, column=None))]
fn gwet_ac1(counts: Vec<Vec<u32>>, column: Option<usize>) -> PyResult<f64> {
    let m = matrix(counts)?;
    match column {
        None => agreement::gwet_ac1_overall(&m),
        Some(c) => agreement::gwet_ac1_per_category(&m, c),
    }
    .map_err(value_err)
}

type Scores = BTreeMap<String, f64>;

fn prf_map(p: &metrics::Prf) -> Scores {
    BTreeMap::from([
        ("precision".to_string(), p.precision),
        ("recall".to_string(), p.recall),
        ("f1".to_string(), p.f1),
    ])
}

/// Macro and per-category scores for gold labels and predictions
/// (None marks an unparsed prediction). Returns `(macro, per_category)`.
#[pyfunction]
fn evaluate(gold: Vec<String>, pred: Vec<Option<String>>) -> PyResult<(Scores, BTreeMap<String, Scores>)> {
    let gold: Vec<Category> = gold.iter().map(|g| category(g)).collect::<PyResult<_>>()?;
    let pred: Vec<Option<Category>> = pred
        .iter()
        .map(|p| p.as_deref().map(category).transpose())
        .collect::<PyResult<_>>()?;
    let m = metrics::confusion(&gold, &pred).map_err(value_err)?;
    let per = metrics::per_category_prf(&m);
    let macro_avg = metrics::macro_average(&per).map_err(value_err)?;
    let per = per
        .iter()
        .map(|(c, p)| (c.canonical_name().to_string(), prf_map(p)))
        .collect();
    Ok((prf_map(&macro_avg), per))
}

/// A sentence dataset loaded from JSON Lines or CSV.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: corpus::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        corpus::load_dataset(&path, Format::from_path(&path))
            .map(|inner| PyDataset { inner })
            .map_err(|e| match e {
                corpus::CorpusError::Io { .. } => PyIOError::new_err(e.to_string()),
                other => value_err(other),
            })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        corpus::save_dataset(&self.inner, &path, Format::from_path(&path))
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    /// Violations against "base", "augmented" or "none".
    #[pyo3(signature = (profile="none"))]
    fn validate(&self, profile: &str) -> PyResult<Vec<String>> {
        let profile: Profile = profile.parse().map_err(PyValueError::new_err)?;
        Ok(corpus::validate_dataset(&self.inner, profile).violations)
    }

    /// A copy with splits assigned per category.
    #[pyo3(signature = (seed=42, train=0.7, validation=0.1, test=0.2))]
    fn split(&self, seed: u64, train: f64, validation: f64, test: f64) -> PyResult<Self> {
        let ratios = SplitRatios { train, validation, test };
        corpus::stratified_split(&self.inner, ratios, seed)
            .map(|inner| PyDataset { inner })
            .map_err(value_err)
    }

    fn split_counts(&self) -> BTreeMap<String, usize> {
        self.inner
            .split_counts()
            .into_iter()
            .map(|(s, n)| (s.as_str().to_string(), n))
            .collect()
    }

    /// `(id, text, label, split)` tuples in file order.
    fn records(&self) -> Vec<(String, String, &'static str, Option<&'static str>)> {
        self.inner
            .records
            .iter()
            .map(|r| (r.id.clone(), r.text.clone(), r.label.canonical_name(), r.split.map(|s| s.as_str())))
            .collect()
    }
}

#[pymodule]
fn scisent_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(categories, m)?)?;
    m.add_function(wrap_pyfunction!(parse_label, m)?)?;
    m.add_function(wrap_pyfunction!(parse_response, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(gate_variant, m)?)?;
    m.add_function(wrap_pyfunction!(fleiss_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(gwet_ac1, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<PyDataset>()?;
    Ok(())
}
