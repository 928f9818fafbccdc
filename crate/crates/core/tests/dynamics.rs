mod common;

use common::*;
use qsync_core::hl_dynamics::{diffusion, drift_matrix, evolve_frozen, integrate_fixed, mean_field_rhs, simulate, Integration};
use qsync_core::linalg::Mat;
use qsync_core::ode::Tolerance;
use qsync_core::quadrature_state::{CovMatrix, MeanState, SystemParams};

fn free() -> SystemParams<f64> {
    SystemParams {
        omega1: 1.0,
        omega2: 0.999,
        gamma1: 0.0,
        gamma2: 0.0,
        g1: 0.0,
        g2: 0.0,
        kappa: 1.0,
        delta: 0.0,
        eta: 0.0,
    }
}

fn damped_driven() -> SystemParams<f64> {
    SystemParams {
        omega1: 1.0,
        omega2: 0.9,
        gamma1: 0.2,
        gamma2: 0.2,
        g1: 0.05,
        g2: 0.04,
        kappa: 1.0,
        delta: -0.5,
        eta: 1.0,
    }
}

fn tight() -> Integration<f64> {
    Integration {
        tol: Tolerance { atol: 1e-13, rtol: 1e-13 },
        max_dt: 0.5,
        ..Integration::default()
    }
}

#[test]
fn frozen_lyapunov_matches_kronecker_solution() {
    let mut r = rng(7);
    for _ in 0..5 {
        let a: Mat<f64, 6> = random_stable_drift(&mut r, 0.5);
        let d: Mat<f64, 6> = random_psd(&mut r);
        let v = evolve_frozen(&a, &d, &Mat::identity().scale(0.5), 40.0, &Tolerance { atol: 1e-12, rtol: 1e-10 }).unwrap();
        let exact = lyapunov_kronecker(&a, &d);
        assert!(rel_frobenius(&v, &exact) < 1e-7, "{}", rel_frobenius(&v, &exact));
    }
}

#[test]
fn rk4_converges_at_fourth_order() {
    let m0 = MeanState { q1: 1.0, p2: 0.5, ..MeanState::zero() };
    let v0 = CovMatrix::from_diagonal([2.0, 0.3, 0.7, 1.1, 0.5, 0.5]);
    let t_end = 10.0;
    let run = |n| integrate_fixed(&free(), &m0, &v0, t_end, n).unwrap();
    let (ma, va) = run(100);
    let (mb, vb) = run(200);
    let (mc, vc) = run(400);
    let diff = |x: &MeanState<f64>, y: &MeanState<f64>| {
        x.to_array().iter().zip(y.to_array()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    // Richardson: successive differences shrink by 2^4 = 16
    let ratio = diff(&ma, &mb) / diff(&mb, &mc);
    assert!((ratio - 16.0).abs() < 0.5, "mean ratio {ratio}");
    let ratio_v = (va.0 - vb.0).frobenius_norm() / (vb.0 - vc.0).frobenius_norm();
    assert!((ratio_v - 16.0).abs() < 0.5, "covariance ratio {ratio_v}");
}

#[test]
fn free_oscillators_conserve_energy_over_a_thousand_periods() {
    let m0 = MeanState { q1: 3.0, p2: -2.0, ..MeanState::zero() };
    let t_end = 2000.0 * std::f64::consts::PI;
    let traj = simulate(&free(), &m0, &CovMatrix::vacuum(), t_end, t_end / 50.0, &tight()).unwrap();
    let energy = |m: &MeanState<f64>| [m.q1 * m.q1 + m.p1 * m.p1, m.q2 * m.q2 + m.p2 * m.p2];
    let e0 = energy(&m0);
    let mut worst: f64 = 0.0;
    for s in &traj.samples {
        let e = energy(&s.mean);
        for j in 0..2 {
            worst = worst.max((e[j] / e0[j] - 1.0).abs());
        }
        // a free oscillator also keeps the vacuum covariance
        assert!((s.cov.0 - CovMatrix::<f64, 6>::vacuum().0).max_abs() < 1e-9);
    }
    assert!(worst < 1e-9, "relative energy drift {worst:e}");
}

#[test]
fn cavity_relaxes_to_driven_steady_state() {
    let mut p = free();
    p.kappa = 0.5;
    p.delta = 0.8;
    p.eta = 2.0;
    let traj = simulate(&p, &MeanState::zero(), &CovMatrix::vacuum(), 100.0, 100.0, &tight()).unwrap();
    let m = traj.last().unwrap().mean;
    // <a> = eta / (kappa - i Delta), quadratures sqrt2 (Re, Im)
    let den = p.kappa * p.kappa + p.delta * p.delta;
    let x = std::f64::consts::SQRT_2 * p.eta * p.kappa / den;
    let y = std::f64::consts::SQRT_2 * p.eta * p.delta / den;
    assert!((m.x - x).abs() < 1e-9 && (m.y - y).abs() < 1e-9, "{m:?}");
}

#[test]
fn coupled_steady_state_solves_the_algebraic_lyapunov_equation() {
    let p = damped_driven();
    let traj = simulate(&p, &MeanState::zero(), &CovMatrix::vacuum(), 400.0, 400.0, &tight()).unwrap();
    let last = traj.last().unwrap();
    let rate = mean_field_rhs(&p, &last.mean).to_array();
    assert!(rate.iter().all(|r| r.abs() < 1e-9), "not stationary: {rate:?}");
    let a = drift_matrix(&p, &last.mean).0;
    let exact = lyapunov_kronecker(&a, &diffusion(&p));
    assert!(rel_frobenius(&last.cov.0, &exact) < 1e-8, "{}", rel_frobenius(&last.cov.0, &exact));
    assert!(min_eigenvalue(&last.cov.0) > 0.0);
}

#[test]
fn samples_land_on_the_grid() {
    let traj = simulate(&damped_driven(), &MeanState::zero(), &CovMatrix::vacuum(), 3.0, 0.25, &Integration::default()).unwrap();
    assert_eq!(traj.len(), 13);
    for (k, t) in traj.times().enumerate() {
        assert!((t - 0.25 * k as f64).abs() < 1e-12);
    }
}

#[test]
fn single_and_double_precision_agree() {
    let p = damped_driven();
    let p32 = SystemParams {
        omega1: p.omega1 as f32,
        omega2: p.omega2 as f32,
        gamma1: p.gamma1 as f32,
        gamma2: p.gamma2 as f32,
        g1: p.g1 as f32,
        g2: p.g2 as f32,
        kappa: p.kappa as f32,
        delta: p.delta as f32,
        eta: p.eta as f32,
    };
    let opts32 = Integration {
        tol: Tolerance { atol: 1e-5f32, rtol: 1e-5 },
        ..Integration::default()
    };
    let a = simulate(&p, &MeanState::zero(), &CovMatrix::vacuum(), 5.0, 5.0, &Integration::default()).unwrap();
    let b = simulate(&p32, &MeanState::zero(), &CovMatrix::vacuum(), 5.0, 5.0, &opts32).unwrap();
    let ma = a.last().unwrap().mean.to_array();
    let mb = b.last().unwrap().mean.to_array();
    for i in 0..6 {
        assert!((ma[i] - mb[i] as f64).abs() < 1e-3, "{i}: {} vs {}", ma[i], mb[i]);
    }
}
