//! Quadratic Q-function estimates at a trajectory point: second-order Taylor
//! expansion of the composed cost, or the exact quadratic of the linearized model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::plant::{Dims, GeneralizedPlant};
use crate::quadform::{min_eig, symmetrize, PartitionedQuad, ValueQuad};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QApproxError {
    #[error("non-finite derivative in {0}")]
    NonFiniteDerivative(&'static str),
    #[error("{what} has dimension {got}, expected {expected}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
}

/// Quadratic stage cost over `(1, dx, du)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageQuadCost {
    pub mat: DMatrix<f64>,
}

/// `x+ ~ f + A dx + Bu du + Bw dw`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linearization {
    pub f: DVector<f64>,
    pub a: DMatrix<f64>,
    pub bu: DMatrix<f64>,
    pub bw: DMatrix<f64>,
}

/// `z ~ z0 + Cx dx + Cu du + Cw dw`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputLinearization {
    pub z: DVector<f64>,
    pub cx: DMatrix<f64>,
    pub cu: DMatrix<f64>,
    pub cw: DMatrix<f64>,
}

impl OutputLinearization {
    /// `[z0 Cx Cu Cw]`, i.e. the rows of `z` over the basis `(1, dx, du, dw)`.
    pub fn rows_over_basis(&self) -> DMatrix<f64> {
        let l = self.z.len();
        let mut out = DMatrix::zeros(l, 1 + self.cx.ncols() + self.cu.ncols() + self.cw.ncols());
        out.set_column(0, &self.z);
        let mut c = 1;
        for blk in [&self.cx, &self.cu, &self.cw] {
            out.view_mut((0, c), (l, blk.ncols())).copy_from(blk);
            c += blk.ncols();
        }
        out
    }
}

const JAC_STEP: f64 = 1e-6;
const HESS_STEP: f64 = 1e-4;

fn concat(x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let mut c = DVector::zeros(x.len() + u.len() + w.len());
    c.rows_mut(0, x.len()).copy_from(x);
    c.rows_mut(x.len(), u.len()).copy_from(u);
    c.rows_mut(x.len() + u.len(), w.len()).copy_from(w);
    c
}

fn unpack(c: &DVector<f64>, dims: Dims) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    (c.rows(0, dims.n).into_owned(), c.rows(dims.n, dims.m).into_owned(), c.rows(dims.n + dims.m, dims.d).into_owned())
}

/// Central differences with step `1e-6 (1 + |c_i|)`.
pub fn fd_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, c: &DVector<f64>, rows: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(rows, c.len());
    for i in 0..c.len() {
        let h = JAC_STEP * (1.0 + c[i].abs());
        let mut cp = c.clone();
        let mut cm = c.clone();
        cp[i] += h;
        cm[i] -= h;
        j.set_column(i, &((f(&cp) - f(&cm)) / (2.0 * h)));
    }
    j
}

fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<(), QApproxError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(QApproxError::NonFiniteDerivative(what))
    }
}

fn split_cols(j: &DMatrix<f64>, dims: Dims) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let r = j.nrows();
    (
        j.view((0, 0), (r, dims.n)).into_owned(),
        j.view((0, dims.n), (r, dims.m)).into_owned(),
        j.view((0, dims.n + dims.m), (r, dims.d)).into_owned(),
    )
}

pub fn linearize(plant: &dyn GeneralizedPlant, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<Linearization, QApproxError> {
    if let Some(lin) = plant.derivatives(x, u, w).and_then(|d| d.dynamics) {
        return Ok(lin);
    }
    let dims = plant.dims();
    let c = concat(x, u, w);
    let j = fd_jacobian(
        |c| {
            let (x, u, w) = unpack(c, dims);
            plant.dynamics(&x, &u, &w)
        },
        &c,
        dims.n,
    );
    check_finite(&j, "dynamics")?;
    let (a, bu, bw) = split_cols(&j, dims);
    Ok(Linearization { f: plant.dynamics(x, u, w), a, bu, bw })
}

pub fn linearize_output(
    plant: &dyn GeneralizedPlant,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<OutputLinearization, QApproxError> {
    if let Some(out) = plant.derivatives(x, u, w).and_then(|d| d.output) {
        return Ok(out);
    }
    let dims = plant.dims();
    let c = concat(x, u, w);
    let j = fd_jacobian(
        |c| {
            let (x, u, w) = unpack(c, dims);
            plant.uncertainty_output(&x, &u, &w)
        },
        &c,
        dims.l,
    );
    check_finite(&j, "uncertainty output")?;
    let (cx, cu, cw) = split_cols(&j, dims);
    Ok(OutputLinearization { z: plant.uncertainty_output(x, u, w), cx, cu, cw })
}

/// Quadratic model of the stage cost at `(x, u)` (central differences, step `1e-4`).
pub fn cost_quadratic(plant: &dyn GeneralizedPlant, x: &DVector<f64>, u: &DVector<f64>) -> Result<StageQuadCost, QApproxError> {
    let dims = plant.dims();
    if let Some(c) = plant.derivatives(x, u, &DVector::zeros(dims.d)).and_then(|d| d.cost) {
        return Ok(c);
    }
    let k = dims.n + dims.m;
    let c = concat(x, u, &DVector::zeros(0));
    let f = |c: &DVector<f64>| plant.stage_cost(&c.rows(0, dims.n).into_owned(), &c.rows(dims.n, dims.m).into_owned());
    let f0 = f(&c);
    let h: Vec<f64> = (0..k).map(|i| HESS_STEP * (1.0 + c[i].abs())).collect();
    let shifted = |pairs: &[(usize, f64)]| {
        let mut cc = c.clone();
        for &(i, s) in pairs {
            cc[i] += s;
        }
        f(&cc)
    };
    let mut grad = DVector::zeros(k);
    let mut hess = DMatrix::zeros(k, k);
    for i in 0..k {
        let (fp, fm) = (shifted(&[(i, h[i])]), shifted(&[(i, -h[i])]));
        grad[i] = (fp - fm) / (2.0 * h[i]);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let v = (shifted(&[(i, h[i]), (j, h[j])]) - shifted(&[(i, h[i]), (j, -h[j])]) - shifted(&[(i, -h[i]), (j, h[j])])
                + shifted(&[(i, -h[i]), (j, -h[j])]))
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let mut mat = DMatrix::zeros(1 + k, 1 + k);
    mat[(0, 0)] = f0;
    mat.view_mut((1, 0), (k, 1)).copy_from(&(&grad * 0.5));
    mat.view_mut((0, 1), (1, k)).copy_from(&(grad.transpose() * 0.5));
    mat.view_mut((1, 1), (k, k)).copy_from(&(hess * 0.5));
    check_finite(&mat, "stage cost")?;
    Ok(StageQuadCost { mat })
}

/// Exact Q for the affine model: `(*)' [P_next (+) R] [selector]`.
pub fn linearized_q(lin: &Linearization, cost: &StageQuadCost, v_next: &ValueQuad) -> Result<PartitionedQuad, QApproxError> {
    let n = lin.a.nrows();
    let (m, d) = (lin.bu.ncols(), lin.bw.ncols());
    let check = |what, expected: usize, got: usize| {
        if expected == got {
            Ok(())
        } else {
            Err(QApproxError::DimensionMismatch { what, expected, got })
        }
    };
    check("A columns", n, lin.a.ncols())?;
    check("f", n, lin.f.len())?;
    check("Bu rows", n, lin.bu.nrows())?;
    check("Bw rows", n, lin.bw.nrows())?;
    check("value anchor", n, v_next.n())?;
    check("stage cost", 1 + n + m, cost.mat.nrows())?;
    let size = 1 + n + m + d;
    let mut psi = DMatrix::zeros(1 + n, size);
    psi[(0, 0)] = 1.0;
    psi.view_mut((1, 0), (n, 1)).copy_from(&(&lin.f - &v_next.anchor));
    psi.view_mut((1, 1), (n, n)).copy_from(&lin.a);
    psi.view_mut((1, 1 + n), (n, m)).copy_from(&lin.bu);
    psi.view_mut((1, 1 + n + m), (n, d)).copy_from(&lin.bw);
    let mut q = psi.transpose() * &v_next.mat * &psi;
    let mut r = q.view_mut((0, 0), (1 + n + m, 1 + n + m));
    r += &cost.mat;
    check_finite(&q, "Q")?;
    Ok(PartitionedQuad::new(symmetrize(&q), n, m, d).expect("consistent sizes"))
}

/// Hessians of each dynamics component over `(x, u, w)` at `c`.
fn dynamics_hessians(plant: &dyn GeneralizedPlant, c: &DVector<f64>) -> Vec<DMatrix<f64>> {
    let dims = plant.dims();
    let k = c.len();
    let eval = |c: &DVector<f64>| {
        let (x, u, w) = unpack(c, dims);
        plant.dynamics(&x, &u, &w)
    };
    let h: Vec<f64> = (0..k).map(|i| HESS_STEP * (1.0 + c[i].abs())).collect();
    let mut out = vec![DMatrix::zeros(k, k); dims.n];
    let (x, u, w) = unpack(c, dims);
    if plant.derivatives(&x, &u, &w).and_then(|d| d.dynamics).is_some() {
        // Differentiate the analytic Jacobians.
        let jac = |c: &DVector<f64>| {
            let (x, u, w) = unpack(c, dims);
            let l = plant.derivatives(&x, &u, &w).and_then(|d| d.dynamics).expect("provider is consistent");
            let mut j = DMatrix::zeros(dims.n, k);
            j.view_mut((0, 0), (dims.n, dims.n)).copy_from(&l.a);
            j.view_mut((0, dims.n), (dims.n, dims.m)).copy_from(&l.bu);
            j.view_mut((0, dims.n + dims.m), (dims.n, dims.d)).copy_from(&l.bw);
            j
        };
        for i in 0..k {
            let (mut cp, mut cm) = (c.clone(), c.clone());
            cp[i] += h[i];
            cm[i] -= h[i];
            let dj = (jac(&cp) - jac(&cm)) / (2.0 * h[i]);
            for (r, hr) in out.iter_mut().enumerate() {
                hr.set_column(i, &dj.row(r).transpose());
            }
        }
        return out.into_iter().map(|m| symmetrize(&m)).collect();
    }
    let f0 = eval(c);
    let shifted = |pairs: &[(usize, f64)]| {
        let mut cc = c.clone();
        for &(i, s) in pairs {
            cc[i] += s;
        }
        eval(&cc)
    };
    for i in 0..k {
        let d2 = (shifted(&[(i, h[i])]) - &f0 * 2.0 + shifted(&[(i, -h[i])])) / (h[i] * h[i]);
        for r in 0..dims.n {
            out[r][(i, i)] = d2[r];
        }
        for j in 0..i {
            let v = (shifted(&[(i, h[i]), (j, h[j])]) - shifted(&[(i, h[i]), (j, -h[j])]) - shifted(&[(i, -h[i]), (j, h[j])])
                + shifted(&[(i, -h[i]), (j, -h[j])]))
                / (4.0 * h[i] * h[j]);
            for r in 0..dims.n {
                out[r][(i, j)] = v[r];
                out[r][(j, i)] = v[r];
            }
        }
    }
    out
}

/// Second-order expansion of `f0(x, u) + V_next(f(x, u, w))` at the point.
pub fn taylor_q(
    plant: &dyn GeneralizedPlant,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
    v_next: &ValueQuad,
) -> Result<PartitionedQuad, QApproxError> {
    let lin = linearize(plant, x, u, w)?;
    let cost = cost_quadratic(plant, x, u)?;
    let base = linearized_q(&lin, &cost, v_next)?;
    if plant.is_linear() {
        return Ok(base);
    }
    let dims = plant.dims();
    // Gradient of V_next at f(x, u, w).
    let g = (v_next.p12() + v_next.p22() * (&lin.f - &v_next.anchor)) * 2.0;
    let hs = dynamics_hessians(plant, &concat(x, u, w));
    let k = dims.n + dims.m + dims.d;
    let mut curv = DMatrix::zeros(k, k);
    for (gk, hk) in g.iter().zip(&hs) {
        curv += hk * (0.5 * gk);
    }
    check_finite(&curv, "dynamics Hessian")?;
    let mut q = base.into_matrix();
    let mut blk = q.view_mut((1, 1), (k, k));
    blk += curv;
    Ok(PartitionedQuad::new(q, dims.n, dims.m, dims.d).expect("consistent sizes"))
}

/// Adds `sigma * blockdiag(0, I)` with the smallest `sigma` in `{0, mu_min 2^k}`
/// making the `(dx, du, dw)` block at least `mu_min * I`. Returns `(Q, sigma)`.
pub fn regularize(q: &PartitionedQuad, mu_min: f64) -> (PartitionedQuad, f64) {
    assert!(mu_min > 0.0, "mu_min must be positive");
    let k = q.size() - 1;
    let sub = q.matrix().view((1, 1), (k, k)).into_owned();
    let lo = min_eig(&sub);
    if lo >= mu_min {
        return (q.clone(), 0.0);
    }
    let mut sigma = mu_min;
    while lo + sigma < mu_min {
        sigma *= 2.0;
    }
    let mut m = q.matrix().clone();
    for i in 1..=k {
        m[(i, i)] += sigma;
    }
    let (n, mm, d) = q.dims();
    (PartitionedQuad::new(m, n, mm, d).expect("same sizes"), sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadform::Block;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// x+ = x + u + w, f0 = u^2 (no derivative provider: finite differences throughout).
    struct Scalar;

    impl GeneralizedPlant for Scalar {
        fn dims(&self) -> Dims {
            Dims { n: 1, m: 1, d: 1, l: 1 }
        }
        fn horizon(&self) -> usize {
            1
        }
        fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
            x + u + w
        }
        fn uncertainty_output(&self, x: &DVector<f64>, _u: &DVector<f64>, _w: &DVector<f64>) -> DVector<f64> {
            x.clone()
        }
        fn stage_cost(&self, _x: &DVector<f64>, u: &DVector<f64>) -> f64 {
            u.norm_squared()
        }
        fn terminal_cost(&self) -> DMatrix<f64> {
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0]))
        }
    }

    /// x+ = (sin x1 + u, x1 x2 + w); f0 = x1^4 + u^2.
    struct Curvy;

    impl GeneralizedPlant for Curvy {
        fn dims(&self) -> Dims {
            Dims { n: 2, m: 1, d: 1, l: 1 }
        }
        fn horizon(&self) -> usize {
            1
        }
        fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![x[0].sin() + u[0], x[0] * x[1] + w[0]])
        }
        fn uncertainty_output(&self, x: &DVector<f64>, _u: &DVector<f64>, _w: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![x[1]])
        }
        fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
            x[0].powi(4) + u[0] * u[0]
        }
        fn terminal_cost(&self) -> DMatrix<f64> {
            DMatrix::identity(3, 3)
        }
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn scalar_plant_expansion_by_hand() {
        // (x+u+w)^2 + u^2 around zero with V_next = x^2.
        let vn = ValueQuad::new(DMatrix::from_diagonal(&v(&[0.0, 1.0])), v(&[0.0]));
        let q = taylor_q(&Scalar, &v(&[0.0]), &v(&[0.0]), &v(&[0.0]), &vn).unwrap();
        let m = q.matrix();
        let expect = DMatrix::from_row_slice(4, 4, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        assert!((m - &expect).amax() < 1e-6, "{m}");
    }

    #[test]
    fn one_step_lqr_blocks() {
        let n = 2;
        let lin = Linearization {
            f: v(&[0.5, -1.0]),
            a: DMatrix::identity(n, n),
            bu: DMatrix::identity(n, n),
            bw: DMatrix::zeros(n, 1),
        };
        let mut r = DMatrix::zeros(1 + 2 * n, 1 + 2 * n);
        r.view_mut((3, 3), (2, 2)).fill_with_identity();
        let mut p = DMatrix::zeros(3, 3);
        p.view_mut((1, 1), (2, 2)).fill_with_identity();
        let vn = ValueQuad::new(p, lin.f.clone());
        let q = linearized_q(&lin, &StageQuadCost { mat: r }, &vn).unwrap();
        assert_eq!(q.block(Block::X, Block::X), DMatrix::identity(2, 2));
        assert_eq!(q.block(Block::U, Block::U), DMatrix::identity(2, 2) * 2.0);
        assert_eq!(q.block(Block::X, Block::U), DMatrix::identity(2, 2));
        for b in [Block::One, Block::X, Block::U, Block::W] {
            assert!(q.block(b, Block::W).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn linearized_q_is_psd_for_psd_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rm = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        for _ in 0..20 {
            let lin = Linearization { f: rm(3, 1).column(0).into_owned(), a: rm(3, 3), bu: rm(3, 2), bw: rm(3, 2) };
            let a = rm(6, 6);
            let b = rm(4, 4);
            let vn = ValueQuad::new(&b * b.transpose(), rm(3, 1).column(0).into_owned());
            let q = linearized_q(&lin, &StageQuadCost { mat: &a * a.transpose() }, &vn).unwrap();
            assert!(min_eig(q.matrix()) >= -1e-9);
        }
    }

    #[test]
    fn taylor_matches_finite_difference_model() {
        let x = v(&[0.3, -0.4]);
        let u = v(&[0.2]);
        let w = v(&[0.0]);
        let vn = ValueQuad::new(DMatrix::from_row_slice(3, 3, &[1.0, 0.2, -0.1, 0.2, 2.0, 0.3, -0.1, 0.3, 1.5]), v(&[0.1, 0.1]));
        let q = taylor_q(&Curvy, &x, &u, &w, &vn).unwrap();
        let phi = |c: &DVector<f64>| {
            let xx = c.rows(0, 2).into_owned();
            let uu = c.rows(2, 1).into_owned();
            let ww = c.rows(3, 1).into_owned();
            Curvy.stage_cost(&xx, &uu) + vn.eval(&Curvy.dynamics(&xx, &uu, &ww))
        };
        let c0 = concat(&x, &u, &w);
        let m = q.matrix();
        assert!((m[(0, 0)] - phi(&c0)).abs() < 1e-10);
        let h = 1e-4;
        for i in 0..4 {
            let mut cp = c0.clone();
            let mut cm = c0.clone();
            cp[i] += h;
            cm[i] -= h;
            let grad = (phi(&cp) - phi(&cm)) / (2.0 * h);
            assert!((2.0 * m[(0, 1 + i)] - grad).abs() <= 1e-5 * (1.0 + grad.abs()));
            for j in 0..4 {
                let s = |di: f64, dj: f64| {
                    let mut c = c0.clone();
                    c[i] += di;
                    c[j] += dj;
                    phi(&c)
                };
                let hij = (s(h, h) - s(h, -h) - s(-h, h) + s(-h, -h)) / (4.0 * h * h);
                assert!((2.0 * m[(1 + i, 1 + j)] - hij).abs() <= 1e-5 * (1.0 + hij.abs()), "{i} {j}");
            }
        }
    }

    #[test]
    fn regularize_cases() {
        let q = PartitionedQuad::new(DMatrix::identity(3, 3) * 2.0, 1, 1, 0).unwrap();
        let (r, s) = regularize(&q, 1.0);
        assert_eq!(s, 0.0);
        assert_eq!(r, q);

        let mut m = DMatrix::zeros(3, 3);
        m[(1, 1)] = -1.0;
        m[(2, 2)] = 3.0;
        m[(0, 0)] = 7.0;
        let q = PartitionedQuad::new(m, 1, 1, 0).unwrap();
        let (r, s) = regularize(&q, 1e-6);
        assert!(s > 1.0 && s <= 2.0, "{s}");
        assert_eq!(r.q11(), 7.0);
        assert!(min_eig(&r.matrix().view((1, 1), (2, 2)).into_owned()) >= 1e-6);
        let (again, s2) = regularize(&r, 1e-6);
        assert_eq!(s2, 0.0);
        assert_eq!(again, r);

        let (z, s) = regularize(&PartitionedQuad::zeros(1, 1, 1), 1e-6);
        assert_eq!(s, 1e-6);
        assert_eq!(z.matrix()[(3, 3)], 1e-6);
    }
}
