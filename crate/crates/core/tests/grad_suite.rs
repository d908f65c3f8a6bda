mod common;

use common::{forecaster_errors, lstm_errors, op_cases, op_error, SEEDS, TOL};

#[test]
fn every_op_matches_central_differences() {
    for (name, shape, op) in op_cases() {
        for seed in SEEDS {
            let err = op_error(&shape, &op, seed);
            assert!(err < TOL, "{name} seed {seed}: {err:.3e}");
        }
    }
}

#[test]
fn lstm_loss_gradients() {
    for seed in SEEDS {
        for (name, err) in lstm_errors(seed) {
            assert!(err < TOL, "{name} seed {seed}: {err:.3e}");
        }
    }
}

#[test]
fn forecaster_loss_gradients() {
    for seed in SEEDS {
        for (name, err) in forecaster_errors(seed) {
            assert!(err < TOL, "{name} seed {seed}: {err:.3e}");
        }
    }
}
