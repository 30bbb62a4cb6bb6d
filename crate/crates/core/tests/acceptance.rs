//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use scisent::agreement::{
    agreement_report, fleiss_kappa, gwet_ac1_overall, load_raw_labels, RatingMatrix,
};
use scisent::augment::{
    augment_dataset, gate_variant, levenshtein, normalized_levenshtein, AugmentationPolicy,
    GateOutcome,
};
use scisent::backend::{BackendConfig, MockBackend, MockResponse};
use scisent::classify::ClassificationRun;
use scisent::corpus::{
    save_dataset, stratified_split, validate_dataset, Format, Profile, Provenance, Split,
    SplitRatios,
};
use scisent::metrics::{
    compare_runs, confusion, harmonic_mean, per_category_prf, CategoryScores, EvalReport, Prf,
};
use scisent::schema::{all_categories, Category};

type Outcome = Result<String, String>;

/// Name, check, and runtime budget.
type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

/// Raised by a criterion whose precondition is absent.
const SKIP_PREFIX: &str = "SKIP:";

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(actual: f64, expected: f64, tol: f64) -> bool {
    (actual - expected).abs() <= tol
}

fn published(values: [(f64, f64, f64); 7]) -> CategoryScores {
    all_categories()
        .into_iter()
        .zip(values)
        .map(|(c, (precision, recall, f1))| (c, Prf { precision, recall, f1 }))
        .collect()
}

fn criterion_1() -> Outcome {
    // (P, R, F1) per category in schema order
    let sonnet = published([
        (1.000, 0.818, 0.900),
        (0.900, 0.947, 0.923),
        (1.000, 0.611, 0.759),
        (0.488, 1.000, 0.656),
        (1.000, 0.476, 0.645),
        (0.900, 0.900, 0.900),
        (1.000, 1.000, 1.000),
    ]);
    let gpt4 = published([
        (0.800, 0.727, 0.762),
        (1.000, 0.737, 0.849),
        (0.833, 0.556, 0.667),
        (0.556, 1.000, 0.714),
        (1.000, 0.524, 0.688),
        (0.809, 0.850, 0.829),
        (0.769, 1.000, 0.870),
    ]);
    let s = EvalReport::from_scores("sonnet", Split::Test, sonnet.clone()).map_err(|e| e.to_string())?;
    let g = EvalReport::from_scores("gpt-4", Split::Test, gpt4.clone()).map_err(|e| e.to_string())?;

    let mean = |scores: &CategoryScores, pick: fn(&Prf) -> f64| {
        scores.values().map(pick).sum::<f64>() / scores.len() as f64
    };
    let oracle_f1 = mean(&sonnet, |p| p.f1);
    let oracle_p = mean(&sonnet, |p| p.precision);
    check!(within(s.macro_avg.f1, oracle_f1, 1e-12), "Sonnet F1 {} vs oracle {}", s.macro_avg.f1, oracle_f1);
    check!(within(s.macro_avg.precision, oracle_p, 1e-12), "Sonnet P {} vs oracle {}", s.macro_avg.precision, oracle_p);
    check!(within(s.macro_avg.f1, 0.826, 0.001), "Sonnet F1 {:.4} not 0.826", s.macro_avg.f1);
    check!(within(s.macro_avg.precision, 0.898, 0.001), "Sonnet P {:.4} not 0.898", s.macro_avg.precision);
    check!(within(g.macro_avg.f1, 0.768, 0.001), "GPT-4 F1 {:.4} not 0.768", g.macro_avg.f1);
    Ok(format!(
        "Sonnet F1 {:.4} P {:.4}; GPT-4 F1 {:.4}",
        s.macro_avg.f1, s.macro_avg.precision, g.macro_avg.f1
    ))
}

fn criterion_2() -> Outcome {
    let d = common::balanced_dataset(100, 11);
    let a = stratified_split(&d, SplitRatios::default(), 2024).map_err(|e| e.to_string())?;
    let b = stratified_split(&d, SplitRatios::default(), 2024).map_err(|e| e.to_string())?;
    check!(a == b, "split is not deterministic under a fixed seed");
    let counts = a.split_counts();
    let totals = [Split::Train, Split::Validation, Split::Test].map(|s| counts.get(&s).copied().unwrap_or(0));
    check!(totals == [490, 70, 140], "split totals {totals:?}");
    let mut per: BTreeMap<(Category, Split), usize> = BTreeMap::new();
    for r in &a.records {
        *per.entry((r.label, r.split.ok_or("unassigned record")?)).or_default() += 1;
    }
    for c in all_categories() {
        let got = [Split::Train, Split::Validation, Split::Test].map(|s| per.get(&(c, s)).copied().unwrap_or(0));
        check!(got == [70, 10, 20], "{} split {got:?}", c.canonical_name());
    }
    check!(validate_dataset(&a, Profile::Base).is_valid(), "base profile violations");
    Ok("490/70/140, 70/10/20 per category, identical reruns".into())
}

fn criterion_3() -> Outcome {
    let d = common::base_benchmark();
    let policy = AugmentationPolicy::default();
    let backend = MockBackend::new(
        BackendConfig { model_id: "mock".into(), ..BackendConfig::default() },
        common::paraphrase_fixtures(&d, 4, policy.min_distance, 17),
    );
    let (aug, report) = augment_dataset(&d, &backend, &policy, 4).map_err(|e| e.to_string())?;
    let new_train = report.new_by_split.get("train").copied().unwrap_or(0);
    let new_val = report.new_by_split.get("validation").copied().unwrap_or(0);
    check!(new_train == 1960 && new_val == 280, "new records train {new_train}, validation {new_val}");
    let counts = aug.split_counts();
    let totals = [Split::Train, Split::Validation, Split::Test].map(|s| counts.get(&s).copied().unwrap_or(0));
    check!(totals == [2450, 350, 140], "totals {totals:?}");
    let v = validate_dataset(&aug, Profile::Augmented);
    check!(v.is_valid(), "augmented profile violations: {:?}", &v.violations[..v.violations.len().min(3)]);
    Ok("1,960 + 280 new; 2,450/350/140; augmented profile valid".into())
}

fn criterion_4() -> Outcome {
    let mut rng = common::rng(4);
    let alphabets: [&[char]; 3] = [
        &['a', 'b'],
        &['a', 'b', 'c', 'd', ' ', 'e'],
        &['x', 'é', '字', 'ß', 'y', '🙂'],
    ];
    for i in 0..1000 {
        let alpha = alphabets[i % 3];
        let mut s = || -> String {
            let n = rng.random_range(0..25);
            (0..n).map(|_| alpha[rng.random_range(0..alpha.len())]).collect()
        };
        let (a, b) = (s(), s());
        let (got, want) = (levenshtein(&a, &b), common::levenshtein_oracle(&a, &b));
        check!(got == want, "pair {i}: {a:?} / {b:?} gave {got}, oracle {want}");
        check!(
            normalized_levenshtein(&a, &b) == common::normalized_oracle(&a, &b),
            "pair {i}: normalized distance differs"
        );
    }

    let policy = AugmentationPolicy::default();
    check!(normalized_levenshtein("abcdefghij", "XYcdefghij") == 0.2, "boundary fixture is not 0.20");
    check!(
        gate_variant("abcdefghij", "XYcdefghij", &[], &policy) != GateOutcome::Pass,
        "distance 0.20 to the original passed"
    );
    // candidate 0.3 from the original; mean to siblings exactly (0.1 + 0.3) / 2
    check!(
        gate_variant("abcdefghij", "XYZdefghij", &["XYZdefghiW", "XYZdefWWWj"], &policy) != GateOutcome::Pass,
        "mean sibling distance 0.20 passed"
    );
    for s in ["", "x", "The same sentence.", "Ünïcödé 字"] {
        check!(gate_variant(s, s, &[], &policy) != GateOutcome::Pass, "identity {s:?} passed");
    }

    // an augmentation that has to discard identities and near-duplicates
    let d = stratified_split(&common::balanced_dataset(10, 5), SplitRatios::default(), 1).map_err(|e| e.to_string())?;
    let mut fixtures = common::paraphrase_fixtures(&d, 4, policy.min_distance, 8);
    for r in d.records.iter() {
        if let Some(MockResponse::Sequence(seq)) = fixtures.responses.get_mut(&r.id) {
            let mut near = r.text.clone();
            near.pop();
            seq.insert(0, near);
            seq.insert(0, r.text.clone());
            seq.insert(3, seq[2].clone());
        }
    }
    let backend = MockBackend::new(BackendConfig::default(), fixtures);
    let (aug, report) = augment_dataset(&d, &backend, &policy, 2).map_err(|e| e.to_string())?;
    check!(report.exhausted == 0, "{} exhausted sources", report.exhausted);
    let mut checked = 0;
    for r in aug.records.iter().filter(|r| r.provenance == Provenance::Synthetic) {
        let src = aug.get(r.source_id.as_deref().unwrap_or("")).ok_or("dangling source")?;
        let siblings: Vec<&str> = aug
            .records
            .iter()
            .filter(|s| s.source_id == r.source_id && s.id != r.id)
            .map(|s| s.text.as_str())
            .collect();
        check!(
            gate_variant(&src.text, &r.text, &siblings, &policy) == GateOutcome::Pass,
            "{} fails the gate",
            r.id
        );
        check!(common::gate_oracle(&src.text, &r.text, &siblings, policy.min_distance), "{} fails the oracle gate", r.id);
        checked += 1;
    }
    check!(checked == 4 * 56, "expected 224 synthetic records, found {checked}");
    Ok(format!("1000 pairs exact; boundary and identity rejected; {checked} synthetic records re-verified"))
}

fn workshop_check(path: &Path) -> Outcome {
    let m = load_raw_labels(path).map_err(|e| e.to_string())?;
    let r = agreement_report(&m).map_err(|e| e.to_string())?;
    let published_ac1 = [0.78, 0.89, 0.89, 0.75, 0.93, 0.97];
    check!(within(r.fleiss_kappa, 0.90, 0.01), "workshop kappa {:.3} not 0.90", r.fleiss_kappa);
    check!(within(r.gwet_ac1, 0.89, 0.01), "workshop AC1 {:.3} not 0.89", r.gwet_ac1);
    // published values cover Research Gap through Other; the Overall entry is the overall AC1
    for ((name, got), want) in r.gwet_ac1_per_category.iter().skip(1).zip(published_ac1) {
        check!(within(*got, want, 0.01), "{name} AC1 {got:.3} not {want}");
    }
    Ok(format!("workshop kappa {:.3}, AC1 {:.3}", r.fleiss_kappa, r.gwet_ac1))
}

fn criterion_5() -> Outcome {
    let unanimous = RatingMatrix::from_rows(3, (0..14).map(|i| {
        let mut row = vec![0; 7];
        row[i % 7] = 3;
        row
    }).collect()).map_err(|e| e.to_string())?;
    check!(fleiss_kappa(&unanimous).map_err(|e| e.to_string())? == 1.0, "perfect kappa is not exactly 1");
    check!(gwet_ac1_overall(&unanimous).map_err(|e| e.to_string())? == 1.0, "perfect AC1 is not exactly 1");

    let worked = RatingMatrix::from_rows(3, vec![vec![3, 0], vec![1, 2]]).map_err(|e| e.to_string())?;
    let k = fleiss_kappa(&worked).map_err(|e| e.to_string())?;
    let a = gwet_ac1_overall(&worked).map_err(|e| e.to_string())?;
    check!(within(k, 0.25, 1e-9), "worked kappa {k}");
    check!(within(a, 0.40, 1e-9), "worked AC1 {a}");

    let mut rng = common::rng(5);
    let mut compared = 0;
    for _ in 0..300 {
        let raters = rng.random_range(2..8);
        let k = rng.random_range(2..8);
        let items = rng.random_range(1..30);
        let counts = common::random_counts(&mut rng, items, raters, k);
        let m = RatingMatrix::from_rows(raters, counts.clone()).map_err(|e| e.to_string())?;
        let (ok, oa) = common::pairwise_agreement(&counts);
        match (ok, fleiss_kappa(&m)) {
            (Some(v), Ok(got)) => check!(within(got, v, 1e-12), "kappa {got} vs oracle {v}"),
            (None, Err(_)) => {}
            (o, g) => return Err(format!("kappa definedness differs: oracle {o:?}, got {g:?}")),
        }
        match (oa, gwet_ac1_overall(&m)) {
            (Some(v), Ok(got)) => check!(within(got, v, 1e-12), "AC1 {got} vs oracle {v}"),
            (None, Err(_)) => {}
            (o, g) => return Err(format!("AC1 definedness differs: oracle {o:?}, got {g:?}")),
        }
        compared += 1;
    }
    Ok(format!("perfect = 1.0 exactly; worked 0.25 / 0.40; {compared} random matrices match oracle"))
}

/// Conditional on per-rater raw labels for the 140-sentence workshop set.
fn criterion_5_workshop() -> Outcome {
    match std::env::var_os("SCISENT_WORKSHOP_RATINGS") {
        Some(p) => workshop_check(Path::new(&p)),
        None => Ok(format!(
            "{SKIP_PREFIX} per-rater raw labels for the workshop set are not available; \
             set SCISENT_WORKSHOP_RATINGS to an item_id,rater_id,label CSV to run it"
        )),
    }
}

fn criterion_6() -> Outcome {
    let mut rng = common::rng(6);
    let cats = all_categories();
    for set in 0..500 {
        let n = rng.random_range(1..200);
        let mut pairs: Vec<(Category, Option<Category>)> = (0..n)
            .map(|_| {
                let g = cats[rng.random_range(0..7)];
                let p = if rng.random_bool(0.05) {
                    None
                } else if rng.random_bool(0.6) {
                    Some(g)
                } else {
                    Some(cats[rng.random_range(0..7)])
                };
                (g, p)
            })
            .collect();
        let (gold, pred): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let m = confusion(&gold, &pred).map_err(|e| e.to_string())?;
        let scores = per_category_prf(&m);
        for c in cats {
            let (p, r, f) = common::direct_prf(&gold, &pred, c);
            let s = scores[&c];
            check!(
                within(s.precision, p, 1e-12) && within(s.recall, r, 1e-12) && within(s.f1, f, 1e-12),
                "set {set}, {}: {s:?} vs oracle ({p}, {r}, {f})",
                c.canonical_name()
            );
            check!(within(s.f1, harmonic_mean(s.precision, s.recall), 1e-12), "harmonic identity fails");
        }
        pairs.shuffle(&mut rng);
        let (g2, p2): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let m2 = confusion(&g2, &p2).map_err(|e| e.to_string())?;
        check!(m2 == m, "set {set}: confusion depends on order");
        check!(per_category_prf(&m2) == scores, "set {set}: scores depend on order");
    }
    Ok("500 sets match direct counts; harmonic identity; permutation invariance".into())
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_scisent"))
        .args(args)
        .current_dir(dir)
        .env_remove("SCISENT_API_KEY")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`scisent {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn criterion_7() -> Outcome {
    let d = common::base_benchmark();
    let fixtures = common::classification_fixtures(&d, Split::Test, common::patterned_response);
    let files = ["predictions.jsonl", "manifest.json", "report.json", "report.csv", "confusion.csv"];
    let mut outputs: Vec<Vec<Vec<u8>>> = Vec::new();
    let mut last_run = None;
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        save_dataset(&d, &dir.path().join("base.jsonl"), Format::JsonLines).map_err(|e| e.to_string())?;
        common::write_json(&dir.path().join("fixtures.json"), &fixtures);
        run_cli(dir.path(), &["--frozen-clock", "--mock", "fixtures.json", "classify", "--dataset", "base.jsonl", "--split", "test", "--out", "run"])?;
        run_cli(dir.path(), &["eval", "--run", "run", "--dataset", "base.jsonl"])?;
        let run_dir = dir.path().join("run");
        outputs.push(
            files
                .iter()
                .map(|f| std::fs::read(run_dir.join(f)).map_err(|e| format!("{f}: {e}")))
                .collect::<Result<_, _>>()?,
        );
        last_run = Some(ClassificationRun::load(&run_dir).map_err(|e| e.to_string())?);
    }
    for (i, f) in files.iter().enumerate() {
        check!(outputs[0][i] == outputs[1][i], "{f} differs between runs");
    }
    let run = last_run.unwrap();
    let test = d.split_records(Split::Test);
    let gold: Vec<Category> = test.iter().map(|r| r.label).collect();
    let pred: Vec<Option<Category>> = test.iter().enumerate().map(|(i, r)| common::patterned_prediction(i, r)).collect();
    let golden = common::oracle_report(&run.manifest.run_id, Split::Test, &gold, &pred).to_json();
    check!(outputs[0][2] == golden.as_bytes(), "report.json differs from the oracle golden");
    let report: EvalReport = serde_json::from_slice(&outputs[0][2]).map_err(|e| e.to_string())?;
    check!(report.unparsed_count == 1, "unparsed_count {}", report.unparsed_count);
    check!(run.manifest.parsed == 139, "{} parsed", run.manifest.parsed);
    Ok(format!("two frozen-clock runs byte-identical; golden matched; macro F1 {:.3}; 139 parsed, 1 unparsed", report.macro_avg.f1))
}

fn flat_report(name: &str, macro_f1: f64) -> EvalReport {
    let scores = published([(macro_f1, macro_f1, macro_f1); 7]);
    EvalReport::from_scores(name, Split::Test, scores).expect("complete scores")
}

fn criterion_8() -> Outcome {
    let lora = flat_report("tinyllama-lora", 0.552);
    let neft = flat_report("tinyllama-neft", 0.702);
    let diff = compare_runs(&lora, &neft).map_err(|e| e.to_string())?.macro_avg.f1;
    check!(within(diff, 0.150, 0.001), "NEFT - LoRA {diff:.4} not 0.150");
    let base = flat_report("bert-base", 0.590);
    let augmented = flat_report("bert-augmented", 0.861);
    let gain = compare_runs(&base, &augmented).map_err(|e| e.to_string())?.macro_avg.f1;
    check!(within(gain, 0.271, 0.001), "augmented gain {gain:.4} not 0.271");
    check!(within(diff, 0.702 - 0.552, 1e-12) && within(gain, 0.861 - 0.590, 1e-12), "delta arithmetic");
    Ok(format!("TinyLlama diff {diff:.3}; BERT gain {gain:.3}"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 macro-average reconstruction", criterion_1, None),
        ("2 split arithmetic", criterion_2, None),
        ("3 augmentation arithmetic", criterion_3, Some(Duration::from_secs(10))),
        ("4 levenshtein gate properties", criterion_4, Some(Duration::from_secs(5))),
        ("5 agreement statistics", criterion_5, Some(Duration::from_secs(2))),
        ("5 workshop agreement (conditional)", criterion_5_workshop, Some(Duration::from_secs(2))),
        ("6 metrics consistency", criterion_6, Some(Duration::from_secs(5))),
        ("7 deterministic end-to-end", criterion_7, Some(Duration::from_secs(10))),
        ("8 run comparison", criterion_8, None),
    ];
    let mut failed = 0;
    for (name, f, budget) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(msg), Some(b)) if elapsed > b => Err(format!("{msg}; took {elapsed:.2?}, budget {b:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(msg) if msg.starts_with(SKIP_PREFIX) => println!(
                "SKIP criterion {name}: {} [{elapsed:.2?}]",
                msg[SKIP_PREFIX.len()..].trim_start()
            ),
            Ok(msg) => println!("PASS criterion {name}: {msg} [{elapsed:.2?}]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg} [{elapsed:.2?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
