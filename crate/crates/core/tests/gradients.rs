#[allow(dead_code)]
mod support;

use support::gradients::{discriminator_loss_check, generator_loss_check, loss_checks, op_checks, Check, TRIALS};

fn assert_all(checks: &[Check]) {
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn graph_ops_match_finite_differences() {
    assert_all(&op_checks());
}

#[test]
fn loss_terms_match_finite_differences() {
    assert_all(&loss_checks());
}

#[test]
fn full_objectives_match_finite_differences() {
    assert_all(&[discriminator_loss_check(TRIALS), generator_loss_check(TRIALS)]);
}
