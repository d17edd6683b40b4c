//! Without uncertainty the robust recursion must reduce to the finite-horizon
//! LQR solution. The reference is a plain Riccati recursion on the plant matrices.

use nalgebra::{DMatrix, DVector};
use rddp_core::driver::{plan, PlanOptions, PlanStatus};
use rddp_core::models::{linear_fixture, LinearKind, LinearPlant};
use rddp_core::plant::GeneralizedPlant;

/// Gains `K_t` (with `u = K_t x`) and cost-to-go matrices `P_0 .. P_T`.
fn riccati(p: &LinearPlant) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let t_max = p.horizon;
    let mut ps = vec![p.qf.clone()];
    let mut ks = Vec::new();
    for _ in 0..t_max {
        let next = ps.last().unwrap();
        let h = &p.r + p.bu.transpose() * next * &p.bu;
        let k = -h.try_inverse().unwrap() * p.bu.transpose() * next * &p.a;
        let acl = &p.a + &p.bu * &k;
        let cur = &p.q + k.transpose() * &p.r * &k + acl.transpose() * next * &acl;
        ps.push((&cur + cur.transpose()) * 0.5);
        ks.push(k);
    }
    ps.reverse();
    ks.reverse();
    (ks, ps)
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

fn check(kind: LinearKind, x0: DVector<f64>) {
    let plant = linear_fixture(kind);
    assert_eq!(plant.dims().d, 0);
    let (ks, ps) = riccati(&plant);
    let p = plan(&plant, &x0, &PlanOptions::default()).unwrap();
    assert_eq!(p.status, PlanStatus::Converged, "{kind:?}");
    for t in 0..plant.horizon {
        let e = rel(&p.policies[t].k2, &ks[t]);
        assert!(e <= 1e-6, "{kind:?} gain at t={t}: relative error {e:.2e}");
        assert!(p.policies[t].k1.amax() <= 1e-6 * (1.0 + x0.norm()));
    }
    for t in 0..=plant.horizon {
        let e = rel(&p.values[t].p22(), &ps[t]);
        assert!(e <= 1e-6, "{kind:?} value at t={t}: relative error {e:.2e}");
    }
    let v_ref = (x0.transpose() * &ps[0] * &x0)[0];
    assert!((p.bound(&x0) - v_ref).abs() <= 1e-6 * v_ref, "{kind:?} value at x0");
}

#[test]
fn scalar_matches_riccati() {
    check(LinearKind::Scalar, DVector::from_element(1, 2.0));
}

#[test]
fn double_integrator_matches_riccati() {
    check(LinearKind::DoubleIntegrator, DVector::from_vec(vec![1.0, -0.5]));
}

#[test]
fn random_stable_seeds_match_riccati() {
    for seed in 1..=5 {
        check(LinearKind::RandomStable { seed, uncertain: false }, DVector::from_vec(vec![0.8, -0.4]));
    }
}

#[test]
fn hand_computed_scalar_first_step() {
    // Last stage of the scalar fixture: P_T = 1, so K = -0.9/2 and P = 1 + 0.2025 + 0.2025.
    let (ks, ps) = riccati(&linear_fixture(LinearKind::Scalar));
    let t = ks.len() - 1;
    assert!((ks[t][(0, 0)] + 0.45).abs() < 1e-15);
    assert!((ps[t][(0, 0)] - 1.405).abs() < 1e-14);
}
