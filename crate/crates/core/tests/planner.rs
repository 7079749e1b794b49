//! Batched planning recursion against explicit tree enumeration.

mod common;

use common::planner_oracle::{depth_zero_mismatches, tree_error, TOLERANCE};

#[test]
fn q_hat_matches_tree_enumeration() {
    let err = tree_error(1, 10);
    assert!(err <= TOLERANCE, "max |q_hat - enumeration| = {:e}", err);
}

#[test]
fn depth_zero_plans_greedily() {
    assert_eq!(depth_zero_mismatches(2, 1_000), 0);
}
