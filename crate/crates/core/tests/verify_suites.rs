//! The three oracle-backed verification suites must pass end to end.

use sar_core::verify::{crf_suite, grad_suite, schedule_suite};
use std::time::Instant;

#[test]
fn gradient_suite_passes_within_budget() {
    let start = Instant::now();
    let report = grad_suite().unwrap();
    let elapsed = start.elapsed();
    print!("{}", report.render());
    println!("grad suite took {elapsed:?}");
    assert!(report.passed(), "{}", report.render());
    assert!(
        elapsed.as_secs() < 120,
        "grad suite exceeded 2 minutes: {elapsed:?}"
    );
}

#[test]
fn crf_suite_passes_within_budget() {
    let start = Instant::now();
    let report = crf_suite().unwrap();
    let elapsed = start.elapsed();
    print!("{}", report.render());
    println!("crf suite took {elapsed:?}");
    assert!(report.passed(), "{}", report.render());
    assert!(
        elapsed.as_secs() < 60,
        "crf suite exceeded 1 minute: {elapsed:?}"
    );
}

#[test]
fn schedule_suite_passes() {
    let report = schedule_suite();
    print!("{}", report.render());
    assert!(report.passed(), "{}", report.render());
}
