//! Consensus and simultaneous gradient ascent on the bilinear game, where
//! every step has a closed form.

mod common;

use common::TinyGan;
use gantrack::gameopt::{
    consensus_step, field_and_norm_grad, gradient_field, sga_step, BilinearGame, GameState, OptimizerConfig,
    Preconditioning, RmsPropState,
};
use proptest::prelude::*;

fn raw(alpha: f64, gamma: f64) -> OptimizerConfig {
    OptimizerConfig {
        alpha,
        gamma,
        preconditioning: Preconditioning::Raw,
        ..Default::default()
    }
}

fn state(t: f64, p: f64) -> GameState {
    GameState { x: vec![t, p], theta_len: 1 }
}

fn sq(s: &GameState) -> f64 {
    s.x.iter().map(|v| v * v).sum()
}

proptest! {
    #[test]
    fn norm_gradient_is_the_state(t in -10.0f64..10.0, p in -10.0f64..10.0) {
        let (eval, r) = field_and_norm_grad(&BilinearGame, &state(t, p)).unwrap();
        prop_assert_eq!(eval.v, vec![p, -t]);
        prop_assert!((r[0] - t).abs() <= 1e-12 && (r[1] - p).abs() <= 1e-12);
    }

    #[test]
    fn sga_squared_norm_grows_by_one_plus_alpha_squared(
        t in -3.0f64..3.0, p in -3.0f64..3.0, alpha in 0.001f64..0.5,
    ) {
        prop_assume!(t.abs() + p.abs() > 1e-3);
        let cfg = raw(alpha, 0.0);
        let mut rms = RmsPropState::default();
        let mut s = state(t, p);
        for _ in 0..50 {
            let v = gradient_field(&BilinearGame, &s).unwrap().v;
            let next = sga_step(&s, &v, &cfg, &mut rms);
            let ratio = sq(&next) / sq(&s);
            prop_assert!((ratio / (1.0 + alpha * alpha) - 1.0).abs() < 1e-10);
            prop_assert!(next.norm() >= s.norm());
            s = next;
        }
    }

    #[test]
    fn consensus_squared_norm_ratio(
        t in -3.0f64..3.0, p in -3.0f64..3.0, alpha in 0.001f64..0.5, gamma in 0.0f64..2.0,
    ) {
        prop_assume!(t.abs() + p.abs() > 1e-3);
        let cfg = raw(alpha, gamma);
        let mut rms = RmsPropState::default();
        let s = state(t, p);
        let next = consensus_step(&BilinearGame, &s, &cfg, &mut rms, 1).unwrap().state;
        let expect = (1.0 - alpha * gamma).powi(2) + alpha * alpha;
        prop_assert!((sq(&next) / sq(&s) / expect - 1.0).abs() < 1e-10);
    }
}

#[test]
fn consensus_converges_where_sga_spirals_out() {
    let mut rms = RmsPropState::default();
    let mut s = state(1.0, 1.0);
    let mut reached = None;
    for k in 1..=500 {
        s = consensus_step(&BilinearGame, &s, &raw(0.1, 1.0), &mut rms, k).unwrap().state;
        if s.norm() < 1e-3 {
            reached = Some(k);
            break;
        }
    }
    let k = reached.expect("consensus did not reach 1e-3 in 500 steps");
    // ‖x‖ shrinks by √0.82 per step from √2
    let predicted = ((2f64.sqrt() / 1e-3).ln() / -(0.82f64.sqrt().ln())).ceil() as usize;
    assert_eq!(k, predicted);

    let mut s = state(1.0, 1.0);
    for k in 1..=500 {
        s = consensus_step(&BilinearGame, &s, &raw(0.1, 0.0), &mut rms, k).unwrap().state;
    }
    assert!(s.norm() > 2f64.sqrt());
}

#[test]
fn gamma_zero_is_sga_on_a_network_game() {
    let gan = TinyGan::new(11);
    let game = gan.game();
    let s = game.state();
    let cfg = OptimizerConfig {
        alpha: 0.01,
        ..Default::default()
    };
    let (mut r1, mut r2) = (RmsPropState::default(), RmsPropState::default());
    let (mut a, mut b) = (s.clone(), s);
    for k in 1..=3 {
        a = consensus_step(&game, &a, &cfg, &mut r1, k).unwrap().state;
        let v = gradient_field(&game, &b).unwrap().v;
        b = sga_step(&b, &v, &cfg, &mut r2);
    }
    assert_eq!(a, b);
}

#[test]
fn rmsprop_first_step_is_sign_like() {
    let cfg = OptimizerConfig::default();
    let mut rms = RmsPropState::default();
    let u = [4.0, -0.25, 0.0];
    let d = rms.precondition(&u, &cfg);
    // m = (1 − ρ) u², so u / √m = ±1/√(1 − ρ) up to ε
    let scale = 1.0 / (1.0 - cfg.rho).sqrt();
    assert!((d[0] - scale).abs() < 1e-6);
    assert!((d[1] + scale).abs() < 1e-6);
    assert_eq!(d[2], 0.0);
}
