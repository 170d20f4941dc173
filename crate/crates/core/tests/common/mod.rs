//! Measurements shared by the numerics tests and the acceptance suite.
#![allow(dead_code)]

use liqhjb::collocation::TrainingBox;
use liqhjb::hjb::{evaluate_loss, improvement_objective_and_grad, pde_loss_and_grad, quadratics, PreparedBatch};
use liqhjb::mc::cholesky3;
use liqhjb::net::{Params, TwoLayerNet};
use liqhjb::{Head, ModelParams, Utility};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_point(rng: &mut ChaCha8Rng, bx: &TrainingBox) -> [f64; 3] {
    [
        rng.random_range(bx.w_min..bx.w_max),
        rng.random_range(bx.l_min..bx.l_max),
        rng.random_range(0.0..bx.maturity),
    ]
}

/// A randomly initialized net with every parameter jittered, so no block is
/// at a special value such as a zero output bias.
pub fn random_net(rng: &mut ChaCha8Rng, hidden: usize, head: Head) -> TwoLayerNet {
    let bx = TrainingBox::default();
    let mut net = TwoLayerNet::init(hidden, head, bx.input_scaling(), rng.random()).unwrap();
    let jitter: Vec<f64> = (0..net.params.len())
        .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    net.params.add_flat(1.0, &jitter).unwrap();
    net
}

/// `|a − b| / max(|b|, 10⁻³)`: relative error with an absolute floor of
/// 10⁻⁹ near zero.
fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-3)
}

/// Worst error of closed-form input jets against central differences over
/// `cases` random nets and points. First derivatives are differenced from
/// the value, second derivatives from the closed-form first derivatives.
pub fn jet_fd_worst(cases: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let bx = TrainingBox::default();
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let head = if case % 2 == 0 { Head::Linear } else { Head::Sigmoid };
        let net = random_net(&mut rng, 16, head);
        let x = random_point(&mut rng, &bx);
        let jet = net.forward_jet(x);
        let h = 1e-5;
        let shift = |d: usize, s: f64| {
            let mut y = x;
            y[d] += s;
            y
        };
        let f = |y: [f64; 3]| net.forward_unchecked(y);
        let g = |y: [f64; 3]| net.forward_jet(y);
        let fd = |d: usize| (f(shift(d, h)) - f(shift(d, -h))) / (2.0 * h);
        let checks = [
            (jet.value, f(x)),
            (jet.d_w, fd(0)),
            (jet.d_l, fd(1)),
            (jet.d_t, fd(2)),
            (jet.d_ww, (g(shift(0, h)).d_w - g(shift(0, -h)).d_w) / (2.0 * h)),
            (jet.d_ll, (g(shift(1, h)).d_l - g(shift(1, -h)).d_l) / (2.0 * h)),
            (jet.d_wl, (g(shift(1, h)).d_w - g(shift(1, -h)).d_w) / (2.0 * h)),
            (jet.d_wl, (g(shift(0, h)).d_l - g(shift(0, -h)).d_l) / (2.0 * h)),
        ];
        for (analytic, numeric) in checks {
            worst = worst.max(rel(analytic, numeric));
        }
    }
    worst
}

fn flat(p: &Params) -> Vec<f64> {
    p.blocks().iter().flat_map(|(_, b)| b.iter().copied()).collect()
}

/// `‖g − g_fd‖∞ / ‖g‖∞` for a loss `f` of the parameters.
fn grad_rel_error(net: &TwoLayerNet, grad: &[f64], f: impl Fn(&TwoLayerNet) -> f64) -> f64 {
    let n = net.params.len();
    let scale = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
    let mut worst: f64 = 0.0;
    let mut e = vec![0.0; n];
    for i in 0..n {
        let h = 1e-5;
        e[i] = h;
        let mut plus = net.clone();
        plus.params.add_flat(1.0, &e).unwrap();
        let mut minus = net.clone();
        minus.params.add_flat(-1.0, &e).unwrap();
        e[i] = 0.0;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        worst = worst.max((grad[i] - fd).abs());
    }
    worst / scale
}

/// Worst relative parameter-gradient error of the evaluation loss and the
/// improvement objective over `cases` random (net, batch) pairs.
pub fn grad_fd_worst(cases: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let bx = TrainingBox::default();
    let params = ModelParams::default();
    let utility = Utility::default();
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let value_net = random_net(&mut rng, 8, Head::Linear);
        let control_net = random_net(&mut rng, 8, Head::Sigmoid);
        let interior: Vec<_> = (0..24).map(|_| random_point(&mut rng, &bx)).collect();
        let terminal: Vec<_> = (0..8)
            .map(|_| {
                let mut x = random_point(&mut rng, &bx);
                x[2] = bx.maturity;
                x
            })
            .collect();
        let batch = PreparedBatch::new(&params, &utility, interior.clone(), terminal).unwrap();
        let omegas: Vec<f64> = (0..interior.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let w_term = 0.7;

        let mut grad = Params::zeros(8);
        pde_loss_and_grad(&value_net, &batch, &omegas, w_term, &mut grad).unwrap();
        let loss = |n: &TwoLayerNet| evaluate_loss(n, &batch, &omegas, w_term).unwrap().total;
        worst = worst.max(grad_rel_error(&value_net, &flat(&grad), loss));

        let quads = quadratics(&params, &value_net, &interior).unwrap();
        improvement_objective_and_grad(&control_net, &interior, &quads, &mut grad).unwrap();
        let objective = |n: &TwoLayerNet| {
            let mut scratch = Params::zeros(8);
            improvement_objective_and_grad(n, &interior, &quads, &mut scratch).unwrap()
        };
        worst = worst.max(grad_rel_error(&control_net, &flat(&grad), objective));
    }
    worst
}

/// Largest |z-score| of the closed-form `E|βL δB^γ + σ_S δB^S|` against a
/// Monte Carlo mean of `samples` correlated normal pairs, over `draws`
/// random parameter sets.
pub fn abs_shock_mc_worst_z(draws: usize, samples: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let p = ModelParams {
            beta: rng.random_range(0.0..1.0),
            sigma_s: rng.random_range(0.05..0.8),
            rho1: rng.random_range(-0.9..0.9),
            delta_t: rng.random_range(0.01..0.5),
            ..Default::default()
        };
        let l = rng.random_range(0.0..2.0);
        let (a, b) = (p.beta * l, p.sigma_s);
        let sd = p.delta_t.sqrt();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..samples {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let db_gamma = sd * z1;
            let db_s = sd * (p.rho1 * z1 + (1.0 - p.rho1 * p.rho1).sqrt() * z2);
            let v = (a * db_gamma + b * db_s).abs();
            sum += v;
            sum_sq += v * v;
        }
        let n = samples as f64;
        let mean = sum / n;
        let se = ((sum_sq / n - mean * mean) / (n - 1.0)).sqrt();
        worst = worst.max((p.expected_abs_shock(l) - mean).abs() / se);
    }
    worst
}

/// `max |F·Fᵀ − C|` for the default correlation matrix.
pub fn cholesky_residual() -> f64 {
    let p = ModelParams::default();
    let f = cholesky3(p.rho1, p.rho2, p.rho3).unwrap();
    let c = p.correlation_matrix();
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let v: f64 = (0..3).map(|k| f[i][k] * f[j][k]).sum();
            worst = worst.max((v - c[i][j]).abs());
        }
    }
    worst
}
