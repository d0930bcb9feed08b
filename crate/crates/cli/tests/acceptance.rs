//! Acceptance criteria, run in order with one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines always reach stdout and the
//! timed criteria never compete with each other for the CPU.

use std::path::Path;
use std::time::{Duration, Instant};

use lorentzian::Dtype;
use lorentzian_cli::alloc::CountingAlloc;
use lorentzian_cli::config::Config;
use lorentzian_cli::suite::SuiteReport;
use lorentzian_cli::{bench, classify, embed, gradcheck, metric, suite};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn properties_pass(report: &SuiteReport, prefixes: &[&str], precisions: &[Dtype]) -> (bool, String) {
    let picked: Vec<_> = report
        .results
        .iter()
        .filter(|r| precisions.contains(&r.precision) && prefixes.iter().any(|p| r.name.starts_with(p)))
        .collect();
    let failed: Vec<String> =
        picked.iter().filter(|r| !r.passed()).map(|r| format!("{} {} worst {:.2e}", r.precision, r.name, r.worst)).collect();
    let ok = !picked.is_empty() && failed.is_empty();
    let detail = if failed.is_empty() { format!("{} properties within tolerance", picked.len()) } else { failed.join("; ") };
    (ok, detail)
}

fn invariant_suite(report: &SuiteReport, elapsed: Duration) -> Outcome {
    let (ok, detail) = properties_pass(
        report,
        &["exp_log_round_trip", "pt_isometry", "pt_tangency", "distance_symmetry", "residual."],
        &[Dtype::F64, Dtype::F32],
    );
    let fast = elapsed <= Duration::from_secs(120);
    outcome(ok && fast, format!("{detail}, {:.1} s", elapsed.as_secs_f64()))
}

fn gradients() -> Outcome {
    let cfg = Config { gradcheck_configs: 10, ..Config::default() };
    let s = gradcheck::run_gradcheck(&cfg).expect("gradcheck runs");
    let all_ten = gradcheck::TARGETS.iter().all(|t| s.results.iter().filter(|r| r.target == *t).count() == 10);
    let worst = s.worst_by_target().into_iter().map(|(_, e)| e).fold(0.0, f64::max);
    outcome(s.passed() && all_ten, format!("worst relative error {worst:.2e} over {} configs", s.results.len()))
}

fn convolution() -> Outcome {
    let t0 = Instant::now();
    let r = bench::bench_conv(&Config::default()).expect("bench runs");
    let elapsed = t0.elapsed();
    let ok = r.equivalence.passed() && r.speedup() >= 1.5 && elapsed <= Duration::from_secs(300);
    outcome(
        ok,
        format!(
            "value diff {:.1e}, gradient diff {:.1e}, speedup {:.2}x, {:.1} s",
            r.equivalence.max_value_diff,
            r.equivalence.max_grad_diff,
            r.speedup(),
            elapsed.as_secs_f64()
        ),
    )
}

fn curvature_ordering() -> Outcome {
    let cfg = Config { precision: Dtype::F32, embed_steps: 500, ..Config::default() };
    let ordered = embed::embed_tree(&cfg, None).expect("ordered run");
    let naive = embed::embed_tree(&Config { naive_curvature_optim: true, ..cfg }, None).expect("naive run");
    let ordered_ok = !ordered.non_finite && ordered.steps_completed == 500 && ordered.max_residual <= 1e-3;
    let contrast = naive.non_finite || naive.max_residual >= 10.0 * ordered.max_residual;
    outcome(
        ordered_ok && contrast,
        format!(
            "ordered residual {:.2e}, naive residual {:.2e}{}",
            ordered.max_residual,
            naive.max_residual,
            if naive.non_finite { " (non-finite)" } else { "" }
        ),
    )
}

fn subset(report: &SuiteReport, prefix: &str) -> Outcome {
    let (ok, detail) = properties_pass(report, &[prefix], &[Dtype::F64, Dtype::F32]);
    outcome(ok, detail)
}

fn classification() -> Outcome {
    let t0 = Instant::now();
    let cfg = Config { precision: Dtype::F32, ..Config::default() };
    let r = classify::train_classify(&cfg, None).expect("classification trains");
    let elapsed = t0.elapsed();
    let finite = r.curvatures.iter().all(|(_, ks)| !ks.is_empty() && ks.iter().all(|k| k.is_finite()));
    let ok = r.epochs <= 20
        && r.train_accuracy >= 0.99
        && r.test_accuracy >= 0.95
        && finite
        && elapsed <= Duration::from_secs(600);
    let ks: Vec<String> = r.curvatures.iter().map(|(n, ks)| format!("K.{n} {:.3}", ks.last().copied().unwrap_or(f64::NAN))).collect();
    outcome(
        ok,
        format!(
            "train {:.3}, test {:.3} after {} epochs, {}, {:.1} s",
            r.train_accuracy,
            r.test_accuracy,
            r.epochs,
            ks.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn hierarchy_regularizer() -> Outcome {
    let mut wins = 0;
    let mut nonnegative = true;
    let mut pairs = Vec::new();
    for seed in 0..10 {
        let base = Config { seed, precision: Dtype::F32, ..Config::default() };
        let with = metric::train_metric(&Config { lhier: true, ..base.clone() }, None);
        let without = metric::train_metric(&Config { lhier: false, ..base }, None);
        match (with, without) {
            (Ok(a), Ok(b)) => {
                nonnegative &= a.min_step_loss >= 0.0 && b.min_step_loss >= 0.0;
                if a.recall[0] >= b.recall[0] {
                    wins += 1;
                }
                pairs.push(format!("{:.2}/{:.2}", a.recall[0], b.recall[0]));
            }
            _ => nonnegative = false,
        }
    }
    outcome(wins >= 7 && nonnegative, format!("{wins}/10 seeds, R@1 with/without {}", pairs.join(" ")))
}

/// Runs one task into `dir` and returns its CSVs sorted by name.
fn task_csvs(dir: &Path, task: &str) -> Vec<(String, Vec<u8>)> {
    let cfg = Config::default();
    match task {
        "check" => suite::run_invariant_suite(&cfg).and_then(|r| r.write_csv(&dir.join("check.csv"))).expect("check runs"),
        "train-classify" => drop(classify::train_classify(&cfg, Some(dir)).expect("classification trains")),
        "train-metric" => drop(metric::train_metric(&cfg, Some(dir)).expect("metric learning trains")),
        other => panic!("unknown task {other}"),
    }
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .expect("output dir")
        .map(|e| e.expect("entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).expect("readable csv")))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let mut mismatched = Vec::new();
    let mut count = 0;
    for task in ["check", "train-classify", "train-metric"] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let first = task_csvs(a.path(), task);
        let second = task_csvs(b.path(), task);
        count += first.len();
        if first.is_empty() || first != second {
            mismatched.push(task);
        }
    }
    if mismatched.is_empty() {
        outcome(true, format!("{count} CSVs byte-identical across two runs"))
    } else {
        outcome(false, format!("differing output from {}", mismatched.join(", ")))
    }
}

fn main() {
    let t0 = Instant::now();
    let report = suite::run_invariant_suite(&Config::default()).expect("suite runs");
    let suite_time = t0.elapsed();

    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("manifold invariant suite", Box::new(|| invariant_suite(&report, suite_time))),
        ("gradient correctness", Box::new(gradients)),
        ("convolution equivalence and speed", Box::new(convolution)),
        ("curvature step ordering", Box::new(curvature_ordering)),
        ("parameter move on curvature change", Box::new(|| subset(&report, "move."))),
        ("maximum-distance rescaling", Box::new(|| subset(&report, "rescale."))),
        ("AdamW reduction", Box::new(|| subset(&report, "adamw."))),
        ("desk-scale classification", Box::new(classification)),
        ("desk-scale hierarchy regularizer", Box::new(hierarchy_regularizer)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let o = check();
        println!("{} {:>2} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, i + 1, o.detail);
        if !o.passed {
            failed.push(i + 1);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
