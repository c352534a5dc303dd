#[path = "common/perception_oracle.rs"]
mod perception_oracle;

use perception_oracle::*;

#[test]
fn quantization_matches_independent_evaluation() {
    let e = quantize_max_error(1000);
    assert!(e < 1e-6, "{e}");
}

#[test]
fn simplex_sum_is_s_over_s_plus_tau() {
    let d = simplex_sum_deviation(1000);
    assert!(d <= 4.0 * f64::EPSILON, "{d}");
}

#[test]
fn worked_delta_examples() {
    let (uniform, one_hot) = worked_deltas();
    assert!((uniform - 0.0625).abs() < 1e-9, "{uniform}");
    assert!((one_hot - 0.025).abs() < 1e-9, "{one_hot}");
}
