//! The three convexifications on the same step problems: the two exact forms
//! agree, and the factorization-based one is never less conservative.

use nalgebra::{DMatrix, DVector};
use rddp_core::backward::{
    backward_step, default_sigma, run_backward_pass, stage_problem, PassOptions, LmiSolver, QMethod, Strategy, StrategyChoice,
};
use rddp_core::driver::rollout_open;
use rddp_core::models::{random_stable, LINEAR_HORIZON};
use rddp_core::plant::GeneralizedPlant;
use rddp_core::quadform::ValueQuad;

#[test]
fn exact_forms_agree_and_canonical_is_conservative() {
    let solver = LmiSolver::default();
    let mut compared = 0;
    for seed in 1..=10u64 {
        // The dual form needs each generator nonsingular on its support, i.e. an
        // output that reads a single coordinate around a trajectory with z = 0.
        let mut plant = random_stable(seed, 2, 1, true);
        plant.cz = DMatrix::from_row_slice(1, 2, if seed % 2 == 0 { &[0.5, 0.0] } else { &[0.0, 0.5] });
        let x0 = DVector::zeros(2);
        let traj = rollout_open(&plant, &x0, &vec![DVector::zeros(1); LINEAR_HORIZON]).unwrap();
        let t = LINEAR_HORIZON - 1 - (seed as usize % 3);
        let pass = run_backward_pass(&plant, &traj, &ValueQuad::new(plant.terminal_cost(), DVector::zeros(2)), &PassOptions::default()).unwrap();
        let v_next = &pass.values[t + 1];
        let (q, mset) = stage_problem(&plant, &traj, t, v_next, QMethod::Linearized).unwrap();
        let sigma = default_sigma(plant.dims().n, 1e-2);
        let simple = backward_step(&q, &mset, &sigma, StrategyChoice::Simple, &solver).unwrap();
        let dual = backward_step(&q, &mset, &sigma, StrategyChoice::Dual, &solver).unwrap();
        let canonical = backward_step(&q, &mset, &sigma, StrategyChoice::Canonical, &solver).unwrap();
        assert_eq!((simple.strategy, dual.strategy, canonical.strategy), (Strategy::Simple, Strategy::Dual, Strategy::Canonical));
        let scale = 1.0 + simple.trace.abs();
        assert!((simple.trace - dual.trace).abs() <= 1e-6 * scale, "seed {seed}: simple {} dual {}", simple.trace, dual.trace);
        assert!(canonical.trace >= dual.trace - 1e-8 * scale, "seed {seed}: canonical {} < dual {}", canonical.trace, dual.trace);
        for r in [&simple, &dual, &canonical] {
            assert!(r.certificate_margin < 0.0, "seed {seed}: {:?} not certified", r.strategy);
        }
        compared += 1;
    }
    assert_eq!(compared, 10);
}
