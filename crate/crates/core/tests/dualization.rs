//! Random checks of the two dualization results: the equivalent form and the
//! one-way form whose converse fails.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rddp_core::quadform::{dualize_equiv, dualize_oneway};
use serde::{Deserialize, Serialize};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/dual_counterexample.json");

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// Symmetric, well-conditioned, with `neg` negative eigenvalues.
fn rand_sym(rng: &mut ChaCha8Rng, size: usize, neg: usize) -> DMatrix<f64> {
    let qr = rand_mat(rng, size, size).qr();
    let v = qr.q();
    let d = DVector::from_fn(size, |i, _| {
        let mag = rng.gen_range(0.3..3.0);
        if i < neg { -mag } else { mag }
    });
    let p = &v * DMatrix::from_diagonal(&d) * v.transpose();
    (&p + p.transpose()) * 0.5
}

/// `P` whose primal inequality for `W` reduces to `S < 0`, with `S` random and
/// the lower block usually definite.
fn structured(rng: &mut ChaCha8Rng, w: &DMatrix<f64>) -> DMatrix<f64> {
    let (l, k) = w.shape();
    let neg = if rng.gen_bool(0.85) { 0 } else { rng.gen_range(0..=l) };
    let p22 = rand_sym(rng, l, neg);
    let p12 = rand_mat(rng, k, l);
    let sk = rand_sym(rng, k, 0);
    let shift = rng.gen_range(-3.5..0.0);
    let s = sk + DMatrix::identity(k, k) * shift;
    let cross = &p12 * w;
    let p11 = s - (&cross + cross.transpose() + w.transpose() * &p22 * w);
    let mut p = DMatrix::zeros(k + l, k + l);
    p.view_mut((0, 0), (k, k)).copy_from(&p11);
    p.view_mut((0, k), (k, l)).copy_from(&p12);
    p.view_mut((k, 0), (l, k)).copy_from(&p12.transpose());
    p.view_mut((k, k), (l, l)).copy_from(&p22);
    (&p + p.transpose()) * 0.5
}

fn eigs(m: &DMatrix<f64>) -> DVector<f64> {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues()
}

/// Sign of definiteness with a safety gap; `None` when too close to call.
fn definite(m: &DMatrix<f64>, positive: bool, gap: f64) -> Option<bool> {
    let e = eigs(m);
    let extreme = if positive { e.min() } else { -e.max() };
    if extreme.abs() < gap {
        None
    } else {
        Some(extreme > 0.0)
    }
}

fn both(a: Option<bool>, b: Option<bool>) -> Option<bool> {
    match (a, b) {
        (Some(false), _) | (_, Some(false)) => Some(false),
        (Some(true), Some(true)) => Some(true),
        _ => None,
    }
}

/// Reference truth values of the primal pair for `(W1; W2)`.
fn primal_ref(p: &DMatrix<f64>, w1: &DMatrix<f64>, w2: &DMatrix<f64>) -> Option<bool> {
    let k = w1.nrows();
    let l = w2.nrows();
    let ww = DMatrix::from_fn(k + l, w1.ncols(), |i, j| if i < k { w1[(i, j)] } else { w2[(i - k, j)] });
    let lower = p.view((k, k), (l, l)).into_owned();
    both(definite(&(ww.transpose() * p * &ww), false, 1e-6), definite(&lower, true, 1e-6))
}

/// Reference truth values of the dual pair for `W`.
fn dual_ref(p: &DMatrix<f64>, w: &DMatrix<f64>) -> Option<bool> {
    let (l, k) = w.shape();
    let pinv = p.clone().try_inverse().unwrap();
    let wt = DMatrix::from_fn(k + l, l, |i, j| if i < k { w[(j, i)] } else if i - k == j { -1.0 } else { 0.0 });
    let upper = pinv.view((0, 0), (k, k)).into_owned();
    both(definite(&(wt.transpose() * &pinv * &wt), true, 1e-6), definite(&upper, false, 1e-6))
}

#[test]
fn equivalent_form_holds_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut done, mut holds) = (0, 0);
    while done < 200 {
        let k = rng.gen_range(1..4);
        let l = rng.gen_range(1..4);
        let w = rand_mat(&mut rng, l, k) * rng.gen_range(0.0..2.0);
        let p = if rng.gen_bool(0.8) {
            structured(&mut rng, &w)
        } else {
            let neg = rng.gen_range(0..=k + l);
            rand_sym(&mut rng, k + l, neg)
        };
        if p.clone().singular_values().min() < 1e-3 {
            continue;
        }
        let (Some(pr), Some(du)) = (primal_ref(&p, &DMatrix::identity(k, k), &w), dual_ref(&p, &w)) else {
            continue;
        };
        let c = dualize_equiv(&p, &w).unwrap();
        assert_eq!((c.primal, c.dual), (pr, du), "library disagrees with reference");
        assert_eq!(c.primal, c.dual, "primal and dual differ:\nP = {p}\nW = {w}");
        holds += c.primal as usize;
        done += 1;
    }
    assert!(holds >= 20 && holds <= 180, "instances too one-sided: {holds}/200 feasible");
}

struct Instance {
    p: DMatrix<f64>,
    w1: DMatrix<f64>,
    w2: DMatrix<f64>,
}

fn oneway_instance(rng: &mut ChaCha8Rng) -> Instance {
    let k = rng.gen_range(2..4);
    let l = rng.gen_range(1..3);
    let c = rng.gen_range(1..k);
    let w1 = rand_mat(rng, k, c);
    let w2 = rand_mat(rng, l, c) * rng.gen_range(0.0..2.0);
    let p = match w1.clone().pseudo_inverse(1e-12) {
        Ok(pinv) if rng.gen_bool(0.8) => structured(rng, &(&w2 * pinv)),
        _ => {
            let neg = rng.gen_range(0..=k + l);
            rand_sym(rng, k + l, neg)
        }
    };
    Instance { p, w1, w2 }
}

fn left_inverse_ref(w1: &DMatrix<f64>) -> DMatrix<f64> {
    (w1.transpose() * w1).try_inverse().unwrap() * w1.transpose()
}

#[test]
fn oneway_form_dual_implies_primal() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut done, mut dual_holds, mut strict) = (0, 0, 0);
    while done < 200 {
        let Instance { p, w1, w2 } = oneway_instance(&mut rng);
        if w1.clone().singular_values().min() < 1e-2 || p.clone().singular_values().min() < 1e-3 {
            continue;
        }
        let w = &w2 * left_inverse_ref(&w1);
        let (Some(pr), Some(du)) = (primal_ref(&p, &w1, &w2), dual_ref(&p, &w)) else {
            continue;
        };
        let c = dualize_oneway(&p, &w1, &w2).unwrap();
        assert_eq!((c.primal, c.dual), (pr, du), "library disagrees with reference");
        assert!(!c.dual || c.primal, "dual holds but primal fails:\nP = {p}\nW1 = {w1}\nW2 = {w2}");
        dual_holds += c.dual as usize;
        strict += (c.primal && !c.dual) as usize;
        done += 1;
    }
    assert!(dual_holds >= 20, "only {dual_holds}/200 instances exercise the implication");
    assert!(strict > 0, "no instance separates the two conditions");
}

#[derive(Serialize, Deserialize)]
struct Counterexample {
    p: Vec<Vec<f64>>,
    w1: Vec<Vec<f64>>,
    w2: Vec<Vec<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>]) -> DMatrix<f64> {
    let c = r.first().map_or(0, |x| x.len());
    DMatrix::from_fn(r.len(), c, |i, j| r[i][j])
}

/// First seeded instance with a clear primal/dual gap.
fn search_counterexample(seed: u64, budget: usize) -> Option<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..budget).map(|_| oneway_instance(&mut rng)).find(|inst| {
        if inst.w1.clone().singular_values().min() < 1e-2 || inst.p.clone().singular_values().min() < 1e-3 {
            return false;
        }
        let w = &inst.w2 * left_inverse_ref(&inst.w1);
        primal_ref(&inst.p, &inst.w1, &inst.w2) == Some(true) && dual_ref(&inst.p, &w) == Some(false)
    })
}

#[test]
fn stored_counterexample_separates_primal_from_dual() {
    if std::env::var_os("RDDP_REGENERATE_FIXTURES").is_some() {
        let inst = search_counterexample(7, 10_000).expect("search found no counterexample");
        let ce = Counterexample { p: rows(&inst.p), w1: rows(&inst.w1), w2: rows(&inst.w2) };
        std::fs::write(FIXTURE, serde_json::to_string_pretty(&ce).unwrap() + "\n").unwrap();
    }
    let ce: Counterexample = serde_json::from_str(&std::fs::read_to_string(FIXTURE).unwrap()).unwrap();
    let (p, w1, w2) = (from_rows(&ce.p), from_rows(&ce.w1), from_rows(&ce.w2));
    let c = dualize_oneway(&p, &w1, &w2).unwrap();
    assert!(c.primal, "stored primal condition does not hold");
    assert!(!c.dual, "stored dual condition holds");
    assert_eq!(primal_ref(&p, &w1, &w2), Some(true));
    assert_eq!(dual_ref(&p, &(&w2 * left_inverse_ref(&w1))), Some(false));
    // The equivalent form is not contradicted: with W1 square the gap closes.
    assert!(w1.ncols() < w1.nrows());
}

#[test]
fn counterexample_search_is_reproducible() {
    let a = search_counterexample(7, 10_000).expect("found");
    let b = search_counterexample(7, 10_000).expect("found");
    assert_eq!(a.p, b.p);
}
