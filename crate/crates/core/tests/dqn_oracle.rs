mod common;

#[test]
fn value_iteration_fixed_point() {
    // Staying in state 1 forever pays 2 / (1 - 0.9) = 20.
    let q = common::value_iteration(0.9);
    assert!((q[1][1] - 20.0).abs() < 1e-9);
    assert!((q[0][1] - 18.0).abs() < 1e-9);
    assert!((q[0][0] - 17.2).abs() < 1e-9);
    assert!((q[1][0] - 15.2).abs() < 1e-9);
}

#[test]
fn dqn_matches_value_iteration() {
    let err = common::dqn_oracle_error(5000, 0.9);
    assert!(err < 1e-2, "sup-norm error {err}");
}

#[test]
fn short_training_is_still_far_from_optimal() {
    // Guards against the oracle passing trivially.
    let err = common::dqn_oracle_error(50, 0.9);
    assert!(err > 1.0, "sup-norm error {err}");
}
