//! Primal-dual interior point method for small dense LMI problems.
//!
//! The problem `min c'y  s.t.  F_0 - margin I + sum y_i F_i >= 0` is written in
//! conic form `G y + s = h, s in K` with `G = -F`, `h = F_0 - margin I`, and solved
//! through the homogeneous self-dual embedding with Nesterov-Todd scaling and a
//! Mehrotra predictor-corrector step. The embedding yields either an optimal
//! point or an infeasibility ray, so callers can tell "no solution" apart from
//! "solver gave up".

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::problem::LmiProblem;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    /// Objective unbounded below (a dual infeasibility ray was found).
    Unbounded,
    MaxIter,
    NumericalFailure,
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Relative duality gap.
    pub gap_tol: f64,
    pub abs_gap_tol: f64,
    pub feas_tol: f64,
    /// Fraction of the distance to the cone boundary taken per step.
    pub step_fraction: f64,
    /// Print one line per iteration to stderr.
    pub verbose: bool,
    /// When progress stalls at roundoff level, the best iterate is still reported
    /// optimal if its residuals are within this factor of the tolerances.
    pub reduced_accuracy: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { max_iters: 200, gap_tol: 1e-8, abs_gap_tol: 1e-10, feas_tol: 1e-9, step_fraction: 0.99, verbose: false, reduced_accuracy: 100.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SdpSolution {
    pub y: Vec<f64>,
    pub status: SolveStatus,
    pub objective: f64,
    /// Smallest eigenvalue of `F(y) - margin I` across blocks and bounds.
    pub residual: f64,
    pub iterations: usize,
    /// Dual multiplier per block (an infeasibility certificate when status is `Infeasible`).
    #[serde(skip)]
    pub dual: Vec<DMatrix<f64>>,
}

/// Anything that can solve an [`LmiProblem`].
pub trait SdpBackend: Send + Sync {
    fn solve(&self, problem: &LmiProblem, opts: &SolverOptions) -> SdpSolution;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct InteriorPoint;

impl SdpBackend for InteriorPoint {
    fn solve(&self, problem: &LmiProblem, opts: &SolverOptions) -> SdpSolution {
        solve(problem, opts)
    }
}

struct Cone {
    n: usize,
    h: DMatrix<f64>,
    coeffs: Vec<(usize, DMatrix<f64>)>,
}

fn cones_of(problem: &LmiProblem) -> Vec<Cone> {
    let mut cones = Vec::new();
    for b in &problem.blocks {
        if b.size == 0 {
            continue;
        }
        let mut vars: Vec<usize> = b.entries.iter().filter_map(|e| e.var).collect();
        vars.sort_unstable();
        vars.dedup();
        let h = b.coefficient(None) - DMatrix::identity(b.size, b.size) * b.margin;
        let coeffs = vars.into_iter().map(|v| (v, b.coefficient(Some(v)))).collect();
        cones.push(Cone { n: b.size, h, coeffs });
    }
    for bd in &problem.bounds {
        cones.push(Cone {
            n: 1,
            h: DMatrix::from_element(1, 1, -bd.lower),
            coeffs: vec![(bd.var, DMatrix::from_element(1, 1, 1.0))],
        });
    }
    cones
}

fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// Symmetric product `(XY + YX) / 2`.
fn circ(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let p = x * y;
    (&p + p.transpose()) * 0.5
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Largest `alpha` with `diag(lam) + alpha * d >= 0` (infinity when unconstrained).
fn max_step(lam: &DVector<f64>, d: &DMatrix<f64>) -> f64 {
    let n = lam.len();
    let mut m = d.clone();
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] /= (lam[i] * lam[j]).sqrt();
        }
    }
    let emin = sym(m).symmetric_eigenvalues().min();
    if emin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / emin
    }
}

fn cholesky_factor(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::Cholesky::new(sym(m.clone())).map(|c| c.l())
}

struct Scaling {
    r: DMatrix<f64>,
    rinv: DMatrix<f64>,
    lam: DVector<f64>,
}

/// NT scaling from factors `ls ls' = s`, `lz lz' = z`.
fn nt_scaling(ls: &DMatrix<f64>, lz: &DMatrix<f64>) -> Option<Scaling> {
    let svd = (lz.transpose() * ls).svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let lam = svd.singular_values;
    if lam.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return None;
    }
    let n = lam.len();
    let mut r = ls * vt.transpose();
    let mut rinv = u.transpose() * lz.transpose();
    for i in 0..n {
        let sq = lam[i].sqrt();
        r.column_mut(i).scale_mut(1.0 / sq);
        rinv.row_mut(i).scale_mut(1.0 / sq);
    }
    Some(Scaling { r, rinv, lam })
}

/// Symmetric vectorization (off-diagonals scaled by sqrt 2) into column `col`.
fn svec_into(m: &DMatrix<f64>, a: &mut DMatrix<f64>, row0: usize, col: usize) {
    let n = m.nrows();
    let mut r = row0;
    for j in 0..n {
        for i in 0..=j {
            a[(r, col)] = if i == j { m[(i, i)] } else { std::f64::consts::SQRT_2 * m[(i, j)] };
            r += 1;
        }
    }
}

fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut v = DVector::zeros(n * (n + 1) / 2);
    let mut r = 0;
    for j in 0..n {
        for i in 0..=j {
            v[r] = if i == j { m[(i, i)] } else { std::f64::consts::SQRT_2 * m[(i, j)] };
            r += 1;
        }
    }
    v
}

/// Symmetric Kronecker product: `svec(A X A') = skron(A) svec(X)` for symmetric `X`.
fn skron(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let nn = n * (n + 1) / 2;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|j| (0..=j).map(move |i| (i, j))).collect();
    let mut k = DMatrix::zeros(nn, nn);
    for (r, &(i, j)) in pairs.iter().enumerate() {
        let si = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
        for (c, &(p, q)) in pairs.iter().enumerate() {
            k[(r, c)] = if p == q {
                si * a[(i, p)] * a[(j, p)]
            } else {
                si * std::f64::consts::FRAC_1_SQRT_2 * (a[(i, p)] * a[(j, q)] + a[(i, q)] * a[(j, p)])
            };
        }
    }
    k
}

fn smat(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut r = 0;
    for j in 0..n {
        for i in 0..=j {
            if i == j {
                m[(i, i)] = v[r];
            } else {
                let x = v[r] * std::f64::consts::FRAC_1_SQRT_2;
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
            r += 1;
        }
    }
    m
}

/// `M = R'R` with `R` upper triangular.
struct Normal {
    r: DMatrix<f64>,
}

impl Normal {
    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let w = self.r.tr_solve_upper_triangular(b).expect("nonsingular");
        self.r.solve_upper_triangular(&w).expect("nonsingular")
    }
}

const REFINE_STEPS: usize = 1;

struct Direction {
    dx: DVector<f64>,
    dtau: f64,
    dkappa: f64,
    ds: Vec<DMatrix<f64>>,
    dz: Vec<DMatrix<f64>>,
}

pub fn solve(problem: &LmiProblem, opts: &SolverOptions) -> SdpSolution {
    let p = problem.dim;
    let fail = |status: SolveStatus, iters: usize| SdpSolution {
        y: vec![0.0; p],
        status,
        objective: f64::NAN,
        residual: f64::NEG_INFINITY,
        iterations: iters,
        dual: Vec::new(),
    };
    if problem.validate().is_err() {
        return fail(SolveStatus::NumericalFailure, 0);
    }
    let cones = cones_of(problem);
    let c = DVector::from_column_slice(&problem.objective);
    let nu: usize = cones.iter().map(|k| k.n).sum();

    if nu == 0 {
        // No constraints: bounded only if c = 0.
        let status = if c.norm() == 0.0 { SolveStatus::Optimal } else { SolveStatus::Unbounded };
        return SdpSolution { y: vec![0.0; p], status, objective: 0.0, residual: f64::INFINITY, iterations: 0, dual: Vec::new() };
    }

    let hnorm = cones.iter().map(|k| k.h.norm_squared()).sum::<f64>().sqrt();
    let res_x0 = c.norm().max(1.0);
    let res_z0 = hnorm.max(1.0);

    let mut x = DVector::<f64>::zeros(p);
    let mut ls: Vec<DMatrix<f64>> = cones.iter().map(|k| DMatrix::identity(k.n, k.n)).collect();
    let mut lz = ls.clone();
    let mut tau = 1.0;
    let mut kappa = 1.0;

    // Unscaled operator in symmetric vectorization: svec(sum_v F_v x_v) = gmat x.
    let offsets: Vec<usize> = cones
        .iter()
        .scan(0, |acc, k| {
            let o = *acc;
            *acc += k.n * (k.n + 1) / 2;
            Some(o)
        })
        .collect();
    let rows_total: usize = cones.iter().map(|k| k.n * (k.n + 1) / 2).sum();
    let mut gmat = DMatrix::<f64>::zeros(rows_total, p);
    for (k, &o) in cones.iter().zip(&offsets) {
        for (v, f) in &k.coeffs {
            svec_into(f, &mut gmat, o, *v);
        }
    }
    let g_apply = |x: &DVector<f64>, idx: usize| -> DMatrix<f64> {
        let n = cones[idx].n;
        let nn = n * (n + 1) / 2;
        let v = gmat.rows(offsets[idx], nn) * x;
        -smat(v.as_slice(), n)
    };
    let gt_apply = |z: &[DMatrix<f64>]| -> DVector<f64> {
        let mut sv = DVector::zeros(rows_total);
        for (idx, zk) in z.iter().enumerate() {
            let v = svec(zk);
            sv.rows_mut(offsets[idx], v.len()).copy_from(&v);
        }
        -(gmat.transpose() * sv)
    };

    // Best iterate so far, scored by the worst tolerance ratio.
    let mut best: Option<(f64, DVector<f64>, f64, Vec<DMatrix<f64>>)> = None;
    let mut since_best = 0usize;
    let mut stopped_at = opts.max_iters;

    for iter in 0..opts.max_iters {
        let s: Vec<DMatrix<f64>> = ls.iter().map(|l| l * l.transpose()).collect();
        let z: Vec<DMatrix<f64>> = lz.iter().map(|l| l * l.transpose()).collect();

        // Residuals of the embedding.
        let gtz = gt_apply(&z);
        let rx = &gtz + &c * tau;
        let rz: Vec<DMatrix<f64>> =
            cones.iter().zip(&s).enumerate().map(|(idx, (k, sk))| g_apply(&x, idx) + sk - &k.h * tau).collect();
        let hz: f64 = cones.iter().zip(&z).map(|(k, zk)| inner(&k.h, zk)).sum();
        let cx = c.dot(&x);
        let rt = kappa + cx + hz;
        let sz: f64 = s.iter().zip(&z).map(|(a, b)| inner(a, b)).sum();

        // Stopping criteria.
        let pcost = cx / tau;
        let dcost = -hz / tau;
        let gap = sz / (tau * tau);
        let pres = rz.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt() / tau / res_z0;
        let dres = rx.norm() / tau / res_x0;
        let relgap = if pcost < 0.0 {
            gap / -pcost
        } else if dcost > 0.0 {
            gap / dcost
        } else {
            f64::INFINITY
        };
        if opts.verbose {
            eprintln!(
                "{iter:3} pcost {pcost:+.6e} dcost {dcost:+.6e} gap {gap:.2e} pres {pres:.2e} dres {dres:.2e} tau {tau:.2e} kappa {kappa:.2e}"
            );
        }
        if !(pres.is_finite() && dres.is_finite() && gap.is_finite()) {
            return fail(SolveStatus::NumericalFailure, iter);
        }
        if pres <= opts.feas_tol && dres <= opts.feas_tol && (gap <= opts.abs_gap_tol || relgap <= opts.gap_tol) {
            return finish(problem, &x, tau, &z, iter, SolveStatus::Optimal);
        }
        let score = (pres / opts.feas_tol).max(dres / opts.feas_tol).max((gap / opts.abs_gap_tol).min(relgap / opts.gap_tol));
        if best.as_ref().map_or(true, |b| score < 0.9 * b.0) {
            best = Some((score, x.clone(), tau, z.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= STALL_ITERS && best.as_ref().is_some_and(|b| b.0 <= opts.reduced_accuracy) {
                stopped_at = iter;
                break;
            }
        }
        if hz < 0.0 {
            let pinf = gtz.norm() / res_x0 / -hz;
            if pinf <= opts.feas_tol {
                let dual: Vec<DMatrix<f64>> = z.iter().map(|m| m / -hz).collect();
                return SdpSolution {
                    y: vec![0.0; p],
                    status: SolveStatus::Infeasible,
                    objective: f64::INFINITY,
                    residual: f64::NEG_INFINITY,
                    iterations: iter,
                    dual,
                };
            }
        }
        if cx < 0.0 {
            let dinf = cones
                .iter()
                .zip(&s)
                .enumerate()
                .map(|(idx, (_, sk))| (g_apply(&x, idx) + sk).norm_squared())
                .sum::<f64>()
                .sqrt()
                / res_z0
                / -cx;
            if dinf <= opts.feas_tol {
                let mut sol = finish(problem, &x, tau, &z, iter, SolveStatus::Unbounded);
                sol.objective = f64::NEG_INFINITY;
                return sol;
            }
        }

        // Scaling and the reduced system.
        let mut scal = Vec::with_capacity(cones.len());
        for (a, b) in ls.iter().zip(&lz) {
            match nt_scaling(a, b) {
                Some(w) => scal.push(w),
                None => return fail(SolveStatus::NumericalFailure, iter),
            }
        }
        let tf = |w: &Scaling, m: &DMatrix<f64>| sym(&w.rinv * m * w.rinv.transpose());
        let ht: Vec<DMatrix<f64>> = cones.iter().zip(&scal).map(|(k, w)| tf(w, &k.h)).collect();
        let rzt: Vec<DMatrix<f64>> = rz.iter().zip(&scal).map(|(m, w)| tf(w, m)).collect();

        // Normal equations M = A'A through a QR factorization of A, whose columns
        // are the scaled coefficient matrices in symmetric vectorization.
        let mut amat = DMatrix::<f64>::zeros(rows_total + p, p);
        let mut bvec = DVector::<f64>::zeros(p);
        let mut gsc = 0.0;
        for (idx, w) in scal.iter().enumerate() {
            let n = w.lam.len();
            let nn = n * (n + 1) / 2;
            let blk = skron(&w.rinv) * gmat.rows(offsets[idx], nn);
            bvec += blk.transpose() * svec(&ht[idx]);
            amat.view_mut((offsets[idx], 0), (nn, p)).copy_from(&blk);
            gsc += ht[idx].norm_squared();
        }
        let rows = rows_total;
        let col_max = (0..p).map(|i| amat.column(i).norm_squared()).fold(0.0_f64, f64::max).max(1e-300);
        let reg = (1e-14 * col_max).sqrt();
        for i in 0..p {
            amat[(rows + i, i)] = reg;
        }
        let chol = Normal { r: amat.clone().qr().r() };
        if (0..p).any(|i| !chol.r[(i, i)].is_finite() || chol.r[(i, i)] == 0.0) {
            return fail(SolveStatus::NumericalFailure, iter);
        }
        let q_vec = chol.solve(&(&bvec + &c));
        let cmb = &c - &bvec;
        let denom_base = cmb.dot(&q_vec) + gsc;

        // Linearized embedding in scaled variables:
        //   -G'dz + c dtau = bx,  -G dx + ds - h dtau = bz,  c'dx + h'dz + dkappa = bt,
        //   ds + dz = bs,  kappa dtau + tau dkappa = bk.
        let ablk = |idx: usize| {
            let n = ht[idx].nrows();
            amat.view((offsets[idx], 0), (n * (n + 1) / 2, p))
        };
        let lin_solve = |bx: &DVector<f64>, bz: &[DMatrix<f64>], bt: f64, bs: &[DMatrix<f64>], bk: f64| -> Direction {
            let mut vmats = Vec::with_capacity(cones.len());
            let mut a = bx.clone();
            let mut e = 0.0;
            for idx in 0..cones.len() {
                let v = &bs[idx] - &bz[idx];
                a += ablk(idx).transpose() * svec(&v);
                e += inner(&ht[idx], &v);
                vmats.push(v);
            }
            let pv = chol.solve(&a);
            let dtau = (cmb.dot(&pv) + e + bk / tau - bt) / (denom_base + kappa / tau);
            let dx = pv - &q_vec * dtau;
            let mut dz = Vec::with_capacity(cones.len());
            let mut ds = Vec::with_capacity(cones.len());
            for idx in 0..cones.len() {
                let n = ht[idx].nrows();
                let gdx = ablk(idx) * &dx;
                let d = &vmats[idx] - &ht[idx] * dtau - smat(gdx.as_slice(), n);
                ds.push(&bs[idx] - &d);
                dz.push(d);
            }
            let dkappa = (bk - kappa * dtau) / tau;
            Direction { dx, dtau, dkappa, ds, dz }
        };
        let lin_apply = |d: &Direction| {
            let mut bx = &c * d.dtau;
            let mut bt = c.dot(&d.dx) + d.dkappa;
            let mut bz = Vec::with_capacity(cones.len());
            let mut bs = Vec::with_capacity(cones.len());
            for idx in 0..cones.len() {
                let n = ht[idx].nrows();
                bx -= ablk(idx).transpose() * svec(&d.dz[idx]);
                let gdx = ablk(idx) * &d.dx;
                let m = &d.ds[idx] - &ht[idx] * d.dtau - smat(gdx.as_slice(), n);
                bt += inner(&ht[idx], &d.dz[idx]);
                bz.push(m);
                bs.push(&d.ds[idx] + &d.dz[idx]);
            }
            (bx, bz, bt, bs, kappa * d.dtau + tau * d.dkappa)
        };
        let solve_dir = |eta: f64, rs: &[DMatrix<f64>], rk: f64| -> Direction {
            let bx = &rx * -eta;
            let bz: Vec<DMatrix<f64>> = rzt.iter().map(|m| m * -eta).collect();
            let bt = -eta * rt;
            let bs: Vec<DMatrix<f64>> = scal
                .iter()
                .zip(rs)
                .map(|(w, r)| {
                    let n = w.lam.len();
                    DMatrix::from_fn(n, n, |i, j| 2.0 * r[(i, j)] / (w.lam[i] + w.lam[j]))
                })
                .collect();
            let mut d = lin_solve(&bx, &bz, bt, &bs, rk);
            for _ in 0..REFINE_STEPS {
                let (ax, az, at, as_, ak) = lin_apply(&d);
                let rz: Vec<DMatrix<f64>> = bz.iter().zip(&az).map(|(a, b)| a - b).collect();
                let rsv: Vec<DMatrix<f64>> = bs.iter().zip(&as_).map(|(a, b)| a - b).collect();
                let corr = lin_solve(&(&bx - ax), &rz, bt - at, &rsv, rk - ak);
                d.dx += corr.dx;
                d.dtau += corr.dtau;
                d.dkappa += corr.dkappa;
                for idx in 0..cones.len() {
                    d.ds[idx] += &corr.ds[idx];
                    d.dz[idx] += &corr.dz[idx];
                }
            }
            d
        };

        let step_len = |d: &Direction| -> f64 {
            let mut a = f64::INFINITY;
            for (idx, w) in scal.iter().enumerate() {
                a = a.min(max_step(&w.lam, &d.ds[idx])).min(max_step(&w.lam, &d.dz[idx]));
            }
            if d.dtau < 0.0 {
                a = a.min(-tau / d.dtau);
            }
            if d.dkappa < 0.0 {
                a = a.min(-kappa / d.dkappa);
            }
            a
        };

        let mu = (sz + tau * kappa) / (nu as f64 + 1.0);
        let lam2: Vec<DMatrix<f64>> = scal.iter().map(|w| DMatrix::from_diagonal(&w.lam.map(|l| l * l))).collect();

        // Predictor.
        let rs_aff: Vec<DMatrix<f64>> = lam2.iter().map(|m| -m).collect();
        let aff = solve_dir(1.0, &rs_aff, -tau * kappa);
        let a_aff = step_len(&aff).min(1.0);
        let sigma = (1.0 - a_aff).powi(3);

        // Corrector.
        let rs: Vec<DMatrix<f64>> = (0..cones.len())
            .map(|idx| {
                let n = scal[idx].lam.len();
                -&lam2[idx] + DMatrix::identity(n, n) * (sigma * mu) - circ(&aff.ds[idx], &aff.dz[idx])
            })
            .collect();
        let rk = -tau * kappa + sigma * mu - aff.dtau * aff.dkappa;
        let dir = solve_dir(1.0 - sigma, &rs, rk);
        let alpha = (opts.step_fraction * step_len(&dir)).min(1.0);
        if !alpha.is_finite() || alpha <= 0.0 {
            return fail(SolveStatus::NumericalFailure, iter);
        }

        x += &dir.dx * alpha;
        tau += alpha * dir.dtau;
        kappa += alpha * dir.dkappa;
        for idx in 0..cones.len() {
            let w = &scal[idx];
            let lamd = DMatrix::from_diagonal(&w.lam);
            let sa = sym(&lamd + &dir.ds[idx] * alpha);
            let za = sym(&lamd + &dir.dz[idx] * alpha);
            let (Some(cs), Some(cz)) = (cholesky_factor(&sa), cholesky_factor(&za)) else {
                return finish(problem, &x, tau, &z, iter, SolveStatus::NumericalFailure);
            };
            ls[idx] = &w.r * cs;
            lz[idx] = w.rinv.transpose() * cz;
        }
        if !(tau > 0.0 && kappa > 0.0) {
            return fail(SolveStatus::NumericalFailure, iter);
        }
    }
    match best {
        Some((score, bx, btau, bz)) => {
            let status = if score <= opts.reduced_accuracy { SolveStatus::Optimal } else { SolveStatus::MaxIter };
            finish(problem, &bx, btau, &bz, stopped_at, status)
        }
        None => {
            let z: Vec<DMatrix<f64>> = lz.iter().map(|l| l * l.transpose()).collect();
            finish(problem, &x, tau, &z, stopped_at, SolveStatus::MaxIter)
        }
    }
}

const STALL_ITERS: usize = 8;

fn finish(problem: &LmiProblem, x: &DVector<f64>, tau: f64, z: &[DMatrix<f64>], iter: usize, status: SolveStatus) -> SdpSolution {
    let mut y: Vec<f64> = x.iter().map(|v| v / tau).collect();
    for b in &problem.bounds {
        if y[b.var] < b.lower {
            y[b.var] = b.lower;
        }
    }
    let dual: Vec<DMatrix<f64>> = z.iter().take(problem.blocks.iter().filter(|b| b.size > 0).count()).map(|m| m / tau).collect();
    SdpSolution {
        objective: problem.objective_value(&y),
        residual: problem.residual(&y),
        y,
        status,
        iterations: iter,
        dual,
    }
}
