mod support;

use support::{attack_check, central_difference, max_relative_error, network_check, wm_check, H};

#[test]
fn oracle_matches_a_known_derivative() {
    let f = |x: &[f64]| x[0].powi(3) + x[0] * x[1].sin();
    let x = [0.7, -1.3];
    let exact = [3.0 * 0.49 + (-1.3f64).sin(), 0.7 * (-1.3f64).cos()];
    assert!(max_relative_error(&exact, &central_difference(f, &x, H)) < 1e-9);
}

#[test]
fn network_gradients_match_differences() {
    for seed in 0..5 {
        let err = network_check(seed);
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn watermark_gradient_matches_differences() {
    for seed in 0..5 {
        let err = wm_check(seed);
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn penalty_gradient_matches_differences() {
    for seed in 0..5 {
        let err = attack_check(seed);
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}
