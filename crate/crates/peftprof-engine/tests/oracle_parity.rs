//! Analytic models vs the instrumented engine: exact per-phase FLOPs and
//! per-group memory equality on randomized toy graphs, all five methods.

use peftprof_engine::verify;

#[test]
fn flops_parity_on_toy_graphs() {
    let results = verify::flops_parity_suite(8, 11, 0);
    let failures: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    assert!(failures.is_empty(), "parity failures: {failures:#?}");
}

#[test]
fn memory_parity_on_toy_graphs() {
    let results = verify::memory_parity_suite(8, 11);
    let failures: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    assert!(failures.is_empty(), "parity failures: {failures:#?}");
}

#[test]
fn corrupted_optimizer_constant_is_detected() {
    // Negative control: biasing the analytic optimizer cost must break parity.
    let results = verify::flops_parity_suite(2, 11, 1);
    assert!(
        results.iter().any(|r| !r.passed),
        "sabotaged parity went unnoticed"
    );
}
