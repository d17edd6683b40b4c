//! The certified value bounds the realized cost under any admissible
//! uncertainty, and every relaxed step bound dominates the exact Q-function.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rddp_core::backward::{run_backward_pass, stage_problem, PassOptions, QMethod};
use rddp_core::driver::{plan, simulate_uncertain, PlanOptions};
use rddp_core::models::{linear_fixture, LinearKind};
use rddp_core::plant::{GeneralizedPlant, UncertaintySample};
use rddp_core::qapprox::linearize_output;
use rddp_core::quadform::ValueQuad;

const SEED: u64 = 3;

#[test]
fn realized_cost_never_exceeds_certified_bound() {
    let plant = linear_fixture(LinearKind::RandomStable { seed: SEED, uncertain: true });
    assert_eq!(plant.channels().len(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_ratio = f64::NEG_INFINITY;
    for _ in 0..10 {
        let x0 = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
        let p = plan(&plant, &x0, &PlanOptions::default()).unwrap();
        let bound = p.bound(&x0);
        assert!(p.values[..plant.horizon()].iter().all(|v| v.certified));
        for k in 0..1000 {
            // Mix time-varying draws with the box corners held constant.
            let sample = match k {
                0 => UncertaintySample::constant_box(plant.horizon(), vec![1.0]),
                1 => UncertaintySample::constant_box(plant.horizon(), vec![-1.0]),
                _ => UncertaintySample::random_box(plant.horizon(), 1, &mut rng),
            };
            let (_, cost) = simulate_uncertain(&plant, &p, &x0, &sample).unwrap();
            assert!(cost <= bound + 1e-6 * bound.abs(), "cost {cost} exceeds bound {bound} at x0 = {x0}");
            worst_ratio = worst_ratio.max(cost / bound);
        }
    }
    // Nontrivial: the uncertainty is large enough to move the cost.
    assert!(worst_ratio > 0.5, "worst cost/bound ratio {worst_ratio}");
}

#[test]
fn relaxed_bound_dominates_q_on_grid() {
    let plant = linear_fixture(LinearKind::RandomStable { seed: SEED, uncertain: true });
    let x0 = DVector::from_vec(vec![1.0, -1.0]);
    let p = plan(&plant, &x0, &PlanOptions::default()).unwrap();
    let v_terminal = ValueQuad::new(plant.terminal_cost(), DVector::zeros(2));
    let opts = PassOptions::default();
    let pass = run_backward_pass(&plant, &p.trajectory, &v_terminal, &opts).unwrap();
    let axis: Vec<f64> = (0..11).map(|i| -1.0 + 0.2 * i as f64).collect();
    let deltas: Vec<f64> = (0..21).map(|i| -1.0 + 0.1 * i as f64).collect();
    let channels = plant.channels();
    let mut checked = 0;
    for t in 0..plant.horizon() {
        let (q, _) = stage_problem(&plant, &p.trajectory, t, &pass.values[t + 1], QMethod::Linearized).unwrap();
        let (xb, ub) = (&p.trajectory.states[t], &p.trajectory.inputs[t]);
        let out = linearize_output(&plant, xb, ub, &DVector::zeros(1)).unwrap();
        assert_eq!(out.cw.amax(), 0.0);
        let step = &pass.steps[t];
        assert!(step.certificate_margin < 0.0);
        for &a in &axis {
            for &b in &axis {
                let dx = DVector::from_vec(vec![a, b]);
                if dx.norm() > 1.0 + 1e-12 {
                    continue;
                }
                let du = &step.policy.k1 + &step.policy.k2 * &dx;
                let z = &out.z + &out.cx * &dx + &out.cu * &du;
                let bound = pass.values[t].eval(&(xb + &dx));
                for &d in &deltas {
                    let dw = DVector::from_fn(1, |i, _| d * z[channels[0][i]]);
                    let qv = q.value(&dx, &du, &dw);
                    let scale = 1.0 + bound.abs().max(qv.abs());
                    assert!(qv <= bound + 1e-8 * scale, "t={t} dx={dx} delta={d}: Q {qv} > bound {bound}");
                    checked += 1;
                }
            }
        }
    }
    // 81 grid points inside the unit disc, 21 parameters, one check per step.
    assert_eq!(checked, 81 * 21 * plant.horizon());
}
