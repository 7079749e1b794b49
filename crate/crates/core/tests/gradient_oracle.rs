//! Analytic gradients against central differences in f64.

mod common;

use common::oracle::{loss_suite, primitive_suite, Outcome, TOLERANCE};

/// The acceptance harness runs the full case count; this keeps `cargo test` quick.
const CASES: usize = 20;

fn assert_all(outcomes: &[Outcome]) {
    for o in outcomes {
        assert!(o.coordinates > 0, "{}: nothing checked", o.name);
        assert!(o.passed(), "{}: worst relative error {:.3e} > {:.0e}", o.name, o.worst, TOLERANCE);
    }
}

#[test]
fn primitives_match_finite_differences() {
    assert_all(&primitive_suite(CASES, 11));
}

#[test]
fn losses_match_finite_differences() {
    assert_all(&loss_suite(CASES / 4, 12));
}
