//! Closed-form derivatives and gradients against finite differences, and
//! market quantities against sampling.

mod common;

use liqhjb::hjb::{EvaluationResiduals, PreparedBatch};
use liqhjb::lm::ResidualSystem;
use liqhjb::{Head, ModelParams, TrainingBox, Utility};

#[test]
fn input_jets_match_finite_differences() {
    let worst = common::jet_fd_worst(100, 1);
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let worst = common::grad_fd_worst(20, 2);
    assert!(worst < 1e-5, "{worst:e}");
}

#[test]
fn expected_abs_shock_matches_sampling() {
    let z = common::abs_shock_mc_worst_z(20, 1_000_000, 3);
    assert!(z < 3.0, "{z}");
}

#[test]
fn default_correlation_factor_reconstructs() {
    assert!(common::cholesky_residual() < 1e-12);
}

#[test]
fn evaluation_jacobian_matches_finite_differences() {
    let mut rng = common::rng(4);
    let bx = TrainingBox::default();
    let params = ModelParams::default();
    let net = common::random_net(&mut rng, 6, Head::Linear);
    let interior: Vec<_> = (0..10).map(|_| common::random_point(&mut rng, &bx)).collect();
    let terminal: Vec<_> = (0..5)
        .map(|_| {
            let mut x = common::random_point(&mut rng, &bx);
            x[2] = bx.maturity;
            x
        })
        .collect();
    let batch = PreparedBatch::new(&params, &Utility::default(), interior, terminal).unwrap();
    let omegas = vec![0.3; 10];
    let system = EvaluationResiduals::new(&batch, &omegas, 2.0, 1e-10).unwrap();
    let (r, jt) = system.jacobian_t(&net).unwrap();
    assert_eq!(r, system.residuals(&net).unwrap());
    let n = net.params.len();
    let scale = jt.amax();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = h;
        let mut plus = net.clone();
        plus.params.add_flat(1.0, &e).unwrap();
        let mut minus = net.clone();
        minus.params.add_flat(-1.0, &e).unwrap();
        let (rp, rm) = (system.residuals(&plus).unwrap(), system.residuals(&minus).unwrap());
        for k in 0..r.len() {
            worst = worst.max((jt[(i, k)] - (rp[k] - rm[k]) / (2.0 * h)).abs());
        }
    }
    assert!(worst < 1e-6 * scale, "{worst:e} vs scale {scale:e}");
}
