use lidf::checks::{geometry_oracles, gradient_checks, metric_oracle};

#[test]
fn traversal_matches_dense_sampling_and_dda() {
    let out = geometry_oracles(400, 3, 5);
    assert!(out.passed, "{out}");
}

#[test]
fn metrics_match_their_formulas() {
    let out = metric_oracle(50, 11);
    assert!(out.passed, "{out}");
}

#[test]
fn every_gradient_path_agrees_with_finite_differences() {
    let outcomes = gradient_checks(4);
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| o.to_string()).collect();
    assert_eq!(outcomes.len(), 9);
    assert!(failed.is_empty(), "{}", failed.join("\n"));
}
