mod common;

use common::*;
use symlearn::training::ModelKind;

fn assert_small(label: &str, errors: impl Iterator<Item = f64>) {
    let worst = errors.fold(0.0, f64::max);
    assert!(worst < FD_TOL, "{label}: max relative error {worst:e}");
}

#[test]
fn dense_layer_matches_finite_differences() {
    assert_small("dense", (0..12).map(dense_layer_error));
}

#[test]
fn fixed_invariant_layer_matches_finite_differences() {
    assert_small("fixed", (0..12).map(fixed_layer_error));
}

#[test]
fn probabilistic_layer_matches_finite_differences() {
    assert_small("probabilistic", (0..12).map(prob_layer_error));
}

#[test]
fn whole_network_losses_match_finite_differences() {
    for kind in [ModelKind::Mlp, ModelKind::RotNet, ModelKind::FlipNet] {
        assert_small(&kind.to_string(), (0..4).map(|s| model_loss_error(kind, s)));
    }
}

#[test]
fn map_objective_with_frozen_noise_matches_finite_differences() {
    assert_small("invariantnet", (0..12).map(|s| model_loss_error(ModelKind::InvariantNet, 100 + s)));
}
