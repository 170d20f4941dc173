//! Structural invariants over random inputs.

mod common;

use liqhjb::collocation::{adaptive_resample, sample_uniform};
use liqhjb::hjb::{apply_operator, decompose_quadratic, pde_loss, pointwise_optimal_control};
use liqhjb::oracles::{reduced_operator, PJet};
use liqhjb::surface::Band;
use liqhjb::{Head, InputJet, ModelParams, StatePoint, TrainingBox, Utility};
use proptest::prelude::*;

fn market() -> impl Strategy<Value = ModelParams> {
    (
        0.0..1.0f64,
        0.05..0.8f64,
        -0.6..0.6f64,
        -0.6..0.6f64,
        -0.6..0.6f64,
        0.0..0.05f64,
        0.0..0.5f64,
        0.1..0.9f64,
        0.0..4.0f64,
    )
        .prop_map(
            |(beta, sigma_s, rho1, rho2, rho3, kappa, sigma_l, zeta, alpha)| ModelParams {
                beta,
                sigma_s,
                rho1,
                rho2,
                rho3,
                kappa,
                sigma_l,
                zeta,
                alpha,
                ..Default::default()
            },
        )
        .prop_filter("correlation must be PSD", |p| p.validate().is_ok())
}

fn jet() -> impl Strategy<Value = InputJet> {
    prop::array::uniform7(-5.0..5.0f64).prop_map(InputJet::from_entries)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn reversion_level_is_concave(p in market(), l1 in 0.0..3.0f64, dl in 1e-6..3.0f64, s in 0.0..1.0f64) {
        let l2 = l1 + dl;
        let mid = p.mean_reversion_level(s * l1 + (1.0 - s) * l2).unwrap();
        let chord = s * p.mean_reversion_level(l1).unwrap() + (1.0 - s) * p.mean_reversion_level(l2).unwrap();
        prop_assert!(mid >= chord - 1e-12);
    }

    #[test]
    fn cost_coefficient_scales_exactly(p in market(), l in 0.0..2.0f64) {
        let c = p.cost_coefficient(l);
        let doubled = ModelParams { kappa: 2.0 * p.kappa, ..p };
        prop_assert_eq!(doubled.cost_coefficient(l), 2.0 * c);
        let quarter = ModelParams { delta_t: p.delta_t / 4.0, ..p };
        prop_assert_eq!(quarter.cost_coefficient(l), 2.0 * c);
    }

    #[test]
    fn endpoint_controls_pay_no_fee(p in market(), w in 0.1..5.0f64, l in 0.0..2.0f64) {
        let free = ModelParams { kappa: 0.0, ..p };
        for omega in [0.0, 1.0] {
            let x = StatePoint::new(w, l, 0.5);
            prop_assert_eq!(p.hjb_coefficients(x, omega).unwrap().a_w, free.hjb_coefficients(x, omega).unwrap().a_w);
        }
    }

    #[test]
    fn diffusion_in_wealth_is_nonnegative(p in market(), w in 0.0..5.0f64, l in 0.0..2.0f64, omega in 0.0..1.0f64) {
        prop_assert!(p.hjb_coefficients(StatePoint::new(w, l, 0.5), omega).unwrap().a_ww >= 0.0);
        prop_assert!(close(p.shock_std(l).powi(2), p.total_variance(l), 1e-12));
    }

    #[test]
    fn operator_is_linear_in_the_jet(p in market(), a in jet(), b in jet(), w in 0.1..5.0f64, l in 0.0..2.0f64, omega in 0.0..1.0f64) {
        let x = StatePoint::new(w, l, 0.3);
        let sum = InputJet::from_entries(std::array::from_fn(|i| a.entries()[i] + b.entries()[i]));
        let lhs = apply_operator(&p, x, &sum, omega).unwrap();
        let rhs = apply_operator(&p, x, &a, omega).unwrap() + apply_operator(&p, x, &b, omega).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn quadratic_reconstructs_the_operator(p in market(), j in jet(), w in 0.1..5.0f64, l in 0.0..2.0f64, omegas in prop::array::uniform5(0.0..1.0f64)) {
        let x = StatePoint::new(w, l, 0.3);
        let q = decompose_quadratic(&p, x, &j).unwrap();
        for omega in omegas {
            let direct = apply_operator(&p, x, &j, omega).unwrap();
            prop_assert!((q.eval(omega) - direct).abs() < 1e-10 * (1.0 + direct.abs()));
        }
        // The pointwise maximizer is at least as good as any sampled control.
        let best = q.eval(pointwise_optimal_control(&q));
        for omega in omegas {
            prop_assert!(best >= q.eval(omega) - 1e-12 * (1.0 + best.abs()));
        }
    }

    #[test]
    fn reduced_and_full_operators_agree(
        p in market(),
        gamma in prop_oneof![-3.0..-0.1f64, 0.1..0.9f64],
        w in 0.2..5.0f64,
        l in 0.0..2.0f64,
        omega in 0.0..1.0f64,
        pj in prop::array::uniform4(-2.0..2.0f64),
    ) {
        // Q = (W^γ/γ)·P with P > 0 and arbitrary derivatives.
        let pjet = PJet { p: 1.0 + pj[0].abs(), p_t: pj[1], p_l: pj[2], p_ll: pj[3] };
        let f = w.powf(gamma) / gamma;
        let full = InputJet {
            value: f * pjet.p,
            d_t: f * pjet.p_t,
            d_w: w.powf(gamma - 1.0) * pjet.p,
            d_ww: (gamma - 1.0) * w.powf(gamma - 2.0) * pjet.p,
            d_l: f * pjet.p_l,
            d_ll: f * pjet.p_ll,
            d_wl: w.powf(gamma - 1.0) * pjet.p_l,
        };
        let lhs = apply_operator(&p, StatePoint::new(w, l, 0.4), &full, omega).unwrap();
        let rhs = f * reduced_operator(&p, gamma, l, &pjet, omega).unwrap();
        let scale = f.abs() * (pjet.p.abs() + pjet.p_t.abs() + pjet.p_l.abs() + pjet.p_ll.abs());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * scale, "{lhs} vs {rhs}");
    }

    #[test]
    fn refinement_keeps_larger_residuals(seed in 0u64..1000, keep in 1usize..50, a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let bx = TrainingBox::default();
        let residual = |x: &[f64; 3]| a * x[0] + b * x[1] * x[2];
        let pool = 200;
        let kept = adaptive_resample(&bx, residual, pool, keep, seed).unwrap();
        prop_assert_eq!(kept.len(), keep);
        // Same seed, keep = pool returns the whole candidate pool.
        let all = adaptive_resample(&bx, residual, pool, pool, seed).unwrap();
        let mean = |v: &[[f64; 3]]| v.iter().map(|x| residual(x).abs()).sum::<f64>() / v.len() as f64;
        prop_assert!(mean(&kept) >= mean(&all) - 1e-12);
        for i in 0..kept.len() {
            for j in 0..i {
                prop_assert_ne!(kept[i], kept[j]);
            }
        }
    }

    #[test]
    fn evaluation_loss_is_nonnegative(seed in 0u64..1000) {
        let mut rng = common::rng(seed);
        let bx = TrainingBox::default();
        let value = common::random_net(&mut rng, 6, Head::Linear);
        let control = common::random_net(&mut rng, 6, Head::Sigmoid);
        let batch = sample_uniform(&bx, 16, 8, seed).unwrap();
        let loss = pde_loss(&ModelParams::default(), &Utility::default(), &value, &control, &batch, 1.0).unwrap();
        prop_assert!(loss.total >= 0.0 && loss.interior >= 0.0 && loss.terminal >= 0.0);
        prop_assert_eq!(loss.total == 0.0, loss.residuals.iter().chain(&loss.terminal_mismatch).all(|r| *r == 0.0));
    }

    #[test]
    fn band_brackets_members(members in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 5), 1..6)) {
        let refs: Vec<&[f64]> = members.iter().map(|m| m.as_slice()).collect();
        let band = Band::from_members(&refs).unwrap();
        for i in 0..5 {
            prop_assert!(band.min[i] <= band.mean[i] && band.mean[i] <= band.max[i]);
        }
    }
}

#[test]
fn sigmoid_head_stays_inside_the_unit_interval() {
    let mut rng = common::rng(8);
    let net = common::random_net(&mut rng, 32, Head::Sigmoid);
    let wide = TrainingBox {
        w_min: -50.0,
        w_max: 50.0,
        l_min: -50.0,
        l_max: 50.0,
        maturity: 50.0,
    };
    for _ in 0..100_000 {
        let y = net.forward_unchecked(common::random_point(&mut rng, &wide));
        assert!(y > 0.0 && y < 1.0, "{y}");
    }
}
