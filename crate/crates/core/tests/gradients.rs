//! Finite-difference checks of every tape op over many seeds.

mod common;

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for report in common::op_suite(100) {
        if !(report.worst < 1e-6) {
            failures.push(format!("{}: {:.3e}", report.name, report.worst));
        }
    }
    assert!(failures.is_empty(), "ops over tolerance: {failures:?}");
}

#[test]
fn composite_paths_on_a_few_seeds() {
    for report in common::composite_suite(3) {
        assert!(report.worst < 1e-4, "{}: {:.3e}", report.name, report.worst);
    }
}
