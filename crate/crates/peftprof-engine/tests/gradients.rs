//! Finite-difference gradient checks and adapter identities.

use peftprof_engine::verify;

#[test]
fn finite_differences_agree_with_backward() {
    let results = verify::gradient_check_suite(5, 11);
    let failures: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    assert!(failures.is_empty(), "gradient failures: {failures:#?}");
}

#[test]
fn adapter_identities_hold() {
    let results = verify::identity_suite(11);
    let failures: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    assert!(failures.is_empty(), "identity failures: {failures:#?}");
}

#[test]
fn seeded_runs_are_reproducible() {
    let results = verify::determinism_suite(11);
    let failures: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    assert!(failures.is_empty(), "determinism failures: {failures:#?}");
}
