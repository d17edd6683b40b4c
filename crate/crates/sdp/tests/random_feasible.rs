use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rddp_sdp::{solve, LmiBlock, LmiProblem, SolveStatus, SolverOptions};

fn rand_sym(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    (&a + a.transpose()) * 0.5
}

fn rand_pd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Strictly feasible (interior point y0) and bounded (c = F'(Z0) with Z0 > 0).
fn random_problem(rng: &mut ChaCha8Rng) -> LmiProblem {
    let p = rng.gen_range(1..=6);
    let nblocks = rng.gen_range(1..=3);
    let y0: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut prob = LmiProblem::new(p);
    for b in 0..nblocks {
        let n = rng.gen_range(2..=6);
        let fi: Vec<(usize, DMatrix<f64>)> = (0..p).map(|i| (i, rand_sym(rng, n))).collect();
        let s0 = rand_pd(rng, n);
        let mut f0 = s0.clone();
        for (i, f) in &fi {
            f0 -= f * y0[*i];
        }
        let z0 = rand_pd(rng, n);
        for (i, f) in &fi {
            prob.objective[*i] += f.component_mul(&z0).sum();
        }
        prob.blocks.push(LmiBlock::from_dense(format!("b{b}"), 1e-7, &f0, &fi));
    }
    prob
}

#[test]
fn fifty_random_strictly_feasible_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let opts = SolverOptions::default();
    for k in 0..50 {
        let prob = random_problem(&mut rng);
        let sol = solve(&prob, &opts);
        if sol.status != SolveStatus::Optimal {
            solve(&prob, &SolverOptions { verbose: true, ..opts.clone() });
        }
        assert_eq!(sol.status, SolveStatus::Optimal, "instance {k}: {:?}", sol.status);
        assert!(sol.residual >= -1e-7, "instance {k}: residual {}", sol.residual);
        // Weak duality: the dual multipliers bound the objective from below.
        let lb: f64 = prob
            .blocks
            .iter()
            .zip(&sol.dual)
            .map(|(b, z)| -(b.coefficient(None) - DMatrix::identity(b.size, b.size) * b.margin).component_mul(z).sum())
            .sum();
        assert!(sol.objective - lb <= 1e-6 * (1.0 + sol.objective.abs()), "instance {k}: gap {}", sol.objective - lb);
    }
}

#[test]
fn debug_dump_is_stable_json() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prob = random_problem(&mut rng);
    let s = prob.to_json();
    let v: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert_eq!(v["schema"], "rddp-lmi/1");
    assert!(v["blocks"][0]["entries"].as_array().unwrap().len() > 0);
    let back = LmiProblem::from_json(&s).unwrap();
    let a = solve(&prob, &SolverOptions::default());
    let b = solve(&back, &SolverOptions::default());
    assert_eq!(a.y, b.y);
}
