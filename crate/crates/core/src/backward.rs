//! Robust backward pass: per timestep, relax the worst case over `dw` with
//! multipliers, pose the Bellman matrix inequality as an LMI and minimize
//! `trace(Sigma P)`.
//!
//! All three convexifications work on `Q / |Q|_F`. Whatever multipliers the
//! solver returns, the policy and value are re-derived in closed form for those
//! multipliers (eliminate `dw`, then `du`), which is the tightest certificate for
//! fixed `lambda`; the solver's own `(K, P)` is kept only when that elimination is
//! not defined.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rddp_sdp::{Expr, InteriorPoint, Model, SdpBackend, SolveStatus, SolverOptions, VarLayout, VarShape};
use serde::{Deserialize, Serialize};

use crate::driver::Trajectory;
use crate::plant::{box_multipliers, GeneralizedPlant, MultiplierSet, PlantError};
use crate::qapprox::{cost_quadratic, linearize, linearize_output, linearized_q, regularize, taylor_q, QApproxError};
use crate::quadform::{is_nd, is_pd, left_inverse, max_eig, min_eig, schur_eliminate, symmetrize, Block, PartitionedQuad, Sign, ValueQuad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Simple,
    Dual,
    Canonical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyChoice {
    #[default]
    Auto,
    Simple,
    Dual,
    Canonical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QMethod {
    Taylor,
    #[default]
    Linearized,
}

impl FromStr for StrategyChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(StrategyChoice::Auto),
            "simple" => Ok(StrategyChoice::Simple),
            "dual" => Ok(StrategyChoice::Dual),
            "canonical" => Ok(StrategyChoice::Canonical),
            _ => Err(format!("unknown strategy `{s}` (expected simple|dual|canonical|auto)")),
        }
    }
}

impl FromStr for QMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "taylor" => Ok(QMethod::Taylor),
            "linearized" => Ok(QMethod::Linearized),
            _ => Err(format!("unknown qmethod `{s}` (expected taylor|linearized)")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::Simple => "simple",
            Strategy::Dual => "dual",
            Strategy::Canonical => "canonical",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StepError {
    #[error("strategy not applicable: {0}")]
    NotApplicable(String),
    #[error("regularity condition violated: {0}")]
    RegularityViolated(String),
    #[error("W12 is rank deficient (smallest singular value {0:.3e})")]
    RankDeficientW12(f64),
    #[error("LMI is infeasible")]
    Infeasible,
    #[error("a posteriori primal check failed (max eigenvalue {0:.3e})")]
    PrimalCheckFailed(f64),
    #[error("SDP solver stopped with status {0:?}")]
    Solver(SolveStatus),
    #[error("LMI assembly failed: {0}")]
    Assemble(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackwardError {
    #[error("timestep {t}: {source}")]
    Step { t: usize, source: StepError },
    #[error("timestep {t}: {source}")]
    QApprox { t: usize, source: QApproxError },
    #[error("timestep {t}: {source}")]
    Plant { t: usize, source: PlantError },
    #[error("trajectory does not match the horizon")]
    TrajectoryMismatch,
}

impl From<rddp_sdp::AssembleError> for StepError {
    fn from(e: rddp_sdp::AssembleError) -> Self {
        StepError::Assemble(e.to_string())
    }
}

/// `u = u_anchor + k1 + K2 (x - x_anchor)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinePolicy {
    pub k1: DVector<f64>,
    pub k2: DMatrix<f64>,
}

impl AffinePolicy {
    pub fn zeros(n: usize, m: usize) -> Self {
        AffinePolicy { k1: DVector::zeros(m), k2: DMatrix::zeros(m, n) }
    }

    /// `[k1 K2]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (m, n) = self.k2.shape();
        let mut k = DMatrix::zeros(m, 1 + n);
        k.set_column(0, &self.k1);
        k.view_mut((0, 1), (m, n)).copy_from(&self.k2);
        k
    }

    pub fn from_stacked(k: &DMatrix<f64>) -> Self {
        let (m, c) = k.shape();
        AffinePolicy { k1: k.column(0).into_owned(), k2: k.view((0, 1), (m, c - 1)).into_owned() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardStepResult {
    pub policy: AffinePolicy,
    /// Value matrix over `(1, dx)`.
    pub value: DMatrix<f64>,
    pub lambda: Vec<f64>,
    pub strategy: Strategy,
    pub status: SolveStatus,
    /// Largest eigenvalue of the realized Bellman inequality matrix (negative = certified).
    pub certificate_margin: f64,
    pub trace: f64,
    /// The closed-form refinement for the solver's multipliers was used.
    pub refined: bool,
    pub iterations: usize,
}

/// SDP backend plus the options every step uses.
#[derive(Clone)]
pub struct LmiSolver {
    pub backend: Arc<dyn SdpBackend>,
    pub options: SolverOptions,
    /// Strict inequalities become `>= margin * I` on the normalized problem.
    pub margin: f64,
}

impl Default for LmiSolver {
    fn default() -> Self {
        LmiSolver { backend: Arc::new(InteriorPoint), options: SolverOptions::default(), margin: 1e-7 }
    }
}

impl fmt::Debug for LmiSolver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LmiSolver").field("options", &self.options).field("margin", &self.margin).finish()
    }
}

/// `blockdiag(1, rho I_n)`.
pub fn default_sigma(n: usize, rho: f64) -> DMatrix<f64> {
    let mut s = DMatrix::identity(1 + n, 1 + n) * rho;
    s[(0, 0)] = 1.0;
    s
}

const MU_FLOOR: f64 = 1e-8;
const REFINE_EPS: f64 = 2e-9;
const CERT_TOL: f64 = 1e-9;
const DUAL_BUDGET: f64 = 1e-6;

/// `Pi(K)`: maps `(1, dx, dw)` to `(1, dx, du, dw)` with `du = k1 + K2 dx`.
pub fn policy_map(n: usize, m: usize, d: usize, k: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(1 + n + m + d, 1 + n + d);
    p.view_mut((0, 0), (1 + n, 1 + n)).fill_with_identity();
    p.view_mut((1 + n, 0), (m, 1 + n)).copy_from(k);
    p.view_mut((1 + n + m, 1 + n), (d, d)).fill_with_identity();
    p
}

/// `Pi(K)' Qbar Pi(K) - diag(P, 0)`; negative definite iff the step is certified.
pub fn bellman_matrix(qbar: &PartitionedQuad, k: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m, d) = qbar.dims();
    let pi = policy_map(n, m, d, k);
    let mut e = pi.transpose() * qbar.matrix() * &pi;
    let mut blk = e.view_mut((0, 0), (1 + n, 1 + n));
    blk -= p;
    symmetrize(&e)
}

/// Closed-form `(K, P)` for fixed multipliers, with `eps` slack on the `dw` block and on `P`.
pub fn refine_for_multipliers(qbar: &PartitionedQuad, eps: f64) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, m, d) = qbar.dims();
    let reduced = if d > 0 {
        let q = qbar.shift_block(Block::W, eps);
        if !is_nd(&q.block(Block::W, Block::W)) {
            return None;
        }
        q.eliminate(Block::W, Sign::Negative).ok()?
    } else {
        qbar.matrix().clone()
    };
    let ux: Vec<usize> = (1 + n..1 + n + m).collect();
    let quu = reduced.select_rows(&ux).select_columns(&ux);
    if !is_pd(&quu) {
        return None;
    }
    let qux = reduced.view((1 + n, 0), (m, 1 + n)).into_owned();
    let chol = quu.cholesky()?;
    let k = -chol.solve(&qux);
    let mut p = schur_eliminate(&reduced, &ux, Sign::Positive).ok()?;
    for i in 0..1 + n {
        p[(i, i)] += eps;
    }
    Some((k, p))
}

struct Normalized {
    q: PartitionedQuad,
    scale: f64,
}

fn normalize(q: &PartitionedQuad) -> Normalized {
    let s = q.matrix().norm();
    let scale = if s > 0.0 { s } else { 1.0 };
    let (n, m, d) = q.dims();
    Normalized { q: PartitionedQuad::new(q.matrix() / scale, n, m, d).expect("same sizes"), scale }
}

fn check_sizes(q: &PartitionedQuad, mset: &MultiplierSet, sigma: &DMatrix<f64>) -> Result<(), StepError> {
    let (n, _, _) = q.dims();
    if mset.size != q.size() && !mset.is_empty() {
        return Err(StepError::NotApplicable(format!("multiplier size {} vs Q size {}", mset.size, q.size())));
    }
    if sigma.nrows() != 1 + n || sigma.ncols() != 1 + n {
        return Err(StepError::NotApplicable("Sigma has the wrong size".into()));
    }
    Ok(())
}

fn lam_expr(lam: &Expr, i: usize) -> Expr {
    lam.select(&[i], &[0])
}

fn solve_model(model: &Model, solver: &LmiSolver) -> Result<(Vec<f64>, VarLayout, SolveStatus, usize), StepError> {
    let (prob, layout) = model.assemble()?;
    let sol = solver.backend.solve(&prob, &solver.options);
    match sol.status {
        SolveStatus::Optimal => Ok((sol.y, layout, sol.status, sol.iterations)),
        SolveStatus::Infeasible => Err(StepError::Infeasible),
        s => Err(StepError::Solver(s)),
    }
}

/// Builds the step result on the original scale, refining `(K, P)` for the multipliers.
fn finish(
    q: &PartitionedQuad,
    mset: &MultiplierSet,
    sigma: &DMatrix<f64>,
    norm: &Normalized,
    lam_n: Vec<f64>,
    k_solver: DMatrix<f64>,
    p_solver_n: DMatrix<f64>,
    strategy: Strategy,
    status: SolveStatus,
    iterations: usize,
) -> Result<BackwardStepResult, StepError> {
    let lam_n: Vec<f64> = lam_n.into_iter().map(|v| v.max(0.0)).collect();
    let qbar_n = norm.q.with_multipliers(&lam_n, &mset.generators);
    let (k, p_n, refined) = match refine_for_multipliers(&qbar_n, REFINE_EPS) {
        Some((k, p)) => (k, p, true),
        None => (k_solver, p_solver_n, false),
    };
    let lambda: Vec<f64> = lam_n.iter().map(|v| v * norm.scale).collect();
    let p = symmetrize(&(&p_n * norm.scale));
    let qbar = q.with_multipliers(&lambda, &mset.generators);
    let margin = max_eig(&bellman_matrix(&qbar, &k, &p));
    if !(margin <= -CERT_TOL * norm.scale) {
        return Err(StepError::PrimalCheckFailed(margin));
    }
    let trace = (sigma * &p).trace();
    Ok(BackwardStepResult {
        policy: AffinePolicy::from_stacked(&k),
        value: p,
        lambda,
        strategy,
        status,
        certificate_margin: margin,
        trace,
        refined,
        iterations,
    })
}

fn u_rows_free(g: &DMatrix<f64>, n: usize, m: usize) -> bool {
    let tol = 1e-14 * (1.0 + g.amax());
    (1 + n..1 + n + m).all(|i| g.row(i).iter().all(|v| v.abs() <= tol))
}

/// Single Schur complement in `du`; needs multiplier-free `u` rows and `Q33 > 0`.
pub fn backward_step_simple(
    q: &PartitionedQuad,
    mset: &MultiplierSet,
    sigma: &DMatrix<f64>,
    solver: &LmiSolver,
) -> Result<BackwardStepResult, StepError> {
    check_sizes(q, mset, sigma)?;
    let (n, m, d) = q.dims();
    if let Some(i) = mset.generators.iter().position(|g| !u_rows_free(g, n, m)) {
        return Err(StepError::NotApplicable(format!("generator {i} involves du")));
    }
    let norm = normalize(q);
    let qn = &norm.q;
    let q33 = qn.block(Block::U, Block::U);
    if !is_pd(&q33) {
        return Err(StepError::NotApplicable("Q33 is not positive definite".into()));
    }
    let r = 1 + n + d;
    let pi0 = policy_map(n, m, d, &DMatrix::zeros(m, 1 + n));
    let mut umat = DMatrix::zeros(q.size(), m);
    umat.view_mut((1 + n, 0), (m, m)).fill_with_identity();
    let mut sel = DMatrix::zeros(1 + n, r);
    sel.view_mut((0, 0), (1 + n, 1 + n)).fill_with_identity();

    let mut model = Model::new();
    let pv = model.var("P", VarShape::Symmetric(1 + n))?;
    let kv = model.var("K", VarShape::Matrix(m, 1 + n))?;
    let s = mset.len();
    let mut l = Expr::constant(pi0.transpose() * qn.matrix() * &pi0);
    if s > 0 {
        let lam = model.var("lam", VarShape::Vector(s))?;
        model.lower_bound("lam", 0.0)?;
        for (i, g) in mset.generators.iter().enumerate() {
            l = l + Expr::constant(pi0.transpose() * g * &pi0).times(&lam_expr(&lam, i))?;
        }
    }
    let mut pad = DMatrix::zeros(r, 1 + n);
    pad.view_mut((0, 0), (1 + n, 1 + n)).fill_with_identity();
    l = l - pv.lmul(&pad)?.rmul(&pad.transpose())?;
    let khat = kv.rmul(&sel)?;
    l = l + khat.lmul(&(pi0.transpose() * qn.matrix() * &umat))?.sym()?;
    let q33inv = q33.clone().try_inverse().ok_or_else(|| StepError::NotApplicable("Q33 is singular".into()))?;
    let lmi = Expr::block(&[vec![Some(l), Some(khat.transpose())], vec![Some(khat), Some(Expr::constant(-symmetrize(&q33inv)))]])?;
    model.nsd("bellman", lmi, solver.margin)?;
    model.minimize(pv.lmul(sigma)?.trace()?)?;

    let (y, layout, status, iters) = solve_model(&model, solver)?;
    let pn = layout.value("P", &y)?;
    let k = layout.value("K", &y)?;
    let lam_n = if s > 0 { layout.value("lam", &y)?.column(0).iter().copied().collect() } else { Vec::new() };
    finish(q, mset, sigma, &norm, lam_n, k, pn, Strategy::Simple, status, iters)
}

/// Support of a generator: indices of its nonzero rows.
fn support(g: &DMatrix<f64>) -> Vec<usize> {
    let tol = 1e-14 * (1.0 + g.amax());
    (0..g.nrows()).filter(|&i| g.row(i).iter().any(|v| v.abs() > tol)).collect()
}

/// Dualized problem in `(P^{-1}, K P^{-1}, 1/lambda)`; needs disjoint generator
/// supports covering `dw`, each generator nonsingular on its support, positive
/// definite on the non-`dw` part of it, and `Q > 0`.
pub fn backward_step_dual(
    q: &PartitionedQuad,
    mset: &MultiplierSet,
    sigma: &DMatrix<f64>,
    solver: &LmiSolver,
) -> Result<BackwardStepResult, StepError> {
    check_sizes(q, mset, sigma)?;
    let (n, m, d) = q.dims();
    let size = q.size();
    let w0 = 1 + n + m;
    let is_w = |i: usize| i >= w0;

    // Structural class: block-diagonal generators whose inverses stay generator-affine.
    let supports: Vec<Vec<usize>> = mset.generators.iter().map(support).collect();
    let mut owner = vec![None; size];
    for (i, s) in supports.iter().enumerate() {
        for &j in s {
            if let Some(o) = owner[j] {
                return Err(StepError::NotApplicable(format!("generators {o} and {i} overlap")));
            }
            owner[j] = Some(i);
        }
    }
    if (w0..size).any(|j| owner[j].is_none()) {
        return Err(StepError::NotApplicable("generators do not cover every dw coordinate".into()));
    }
    let mut inv_blocks = Vec::with_capacity(supports.len());
    for (i, (g, s)) in mset.generators.iter().zip(&supports).enumerate() {
        let blk = g.select_rows(s).select_columns(s);
        let sv = blk.clone().singular_values();
        if sv.min() <= 1e-12 * sv.max() {
            return Err(StepError::NotApplicable(format!("generator {i} is singular on its support")));
        }
        let sp: Vec<usize> = (0..s.len()).filter(|&a| !is_w(s[a])).collect();
        if !is_pd(&blk.select_rows(&sp).select_columns(&sp)) {
            return Err(StepError::RegularityViolated(format!("generator {i} is not positive definite off dw")));
        }
        inv_blocks.push(symmetrize(&blk.try_inverse().expect("nonsingular")));
    }

    let norm = normalize(q);
    let mut qn = norm.q.matrix().clone();
    let need = 2.0 * 1e-9 * (1.0 + qn.norm()) - min_eig(&qn);
    if need > 0.0 {
        if need > DUAL_BUDGET {
            return Err(StepError::RegularityViolated(format!("Q needs a shift of {need:.3e}")));
        }
        for i in 0..size {
            qn[(i, i)] += need;
        }
    }
    let qinv = symmetrize(&qn.clone().try_inverse().ok_or_else(|| StepError::RegularityViolated("Q is singular".into()))?);

    // Stacked multiplier coordinates T; S' = the non-dw members.
    let t: Vec<usize> = supports.iter().flatten().copied().collect();
    let sprime: Vec<usize> = (0..t.len()).filter(|&a| !is_w(t[a])).collect();
    let wpos: Vec<usize> = (w0..size).map(|j| t.iter().position(|&x| x == j).expect("covered")).collect();
    let ns = sprime.len();
    let b = ns + size;
    let s = mset.len();

    let mut model = Model::new();
    let ptv = model.var("Pt", VarShape::Symmetric(1 + n))?;
    let yv = model.var("Y", VarShape::Matrix(m, 1 + n))?;
    let zv = model.var("Z", VarShape::Symmetric(1 + n))?;
    // Mtilde over T as an expression in mu.
    let mut mt = Expr::zeros(t.len(), t.len());
    if s > 0 {
        let mu = model.var("mu", VarShape::Vector(s))?;
        model.lower_bound("mu", MU_FLOOR)?;
        let mut off = 0;
        for (i, inv) in inv_blocks.iter().enumerate() {
            let k = inv.nrows();
            let mut e = DMatrix::zeros(t.len(), t.len());
            e.view_mut((off, off), (k, k)).copy_from(inv);
            mt = mt + Expr::constant(e).times(&lam_expr(&mu, i))?;
            off += k;
        }
    }
    let mt_sp_sp = mt.select(&sprime, &sprime);
    let mt_w_sp = mt.select(&wpos, &sprime);
    let mt_ww = mt.select(&wpos, &wpos);

    // W = [Pi(K) rows on S'; Pi(K)], split into the (1, dx) and dw columns.
    let pi0 = policy_map(n, m, d, &DMatrix::zeros(m, 1 + n));
    let rows_b: Vec<usize> = sprime.iter().map(|&a| t[a]).chain(0..size).collect();
    let w_full = pi0.select_rows(&rows_b);
    let w1x = w_full.columns(0, 1 + n).into_owned();
    let ww = w_full.columns(1 + n, d).into_owned();
    let mut ub = DMatrix::zeros(b, m);
    for (r, &row) in rows_b.iter().enumerate() {
        if (1 + n..1 + n + m).contains(&row) {
            ub[(r, row - 1 - n)] = 1.0;
        }
    }
    let mut eprime = DMatrix::zeros(ns, b);
    eprime.view_mut((0, 0), (ns, ns)).fill_with_identity();

    let ctil = Expr::block(&[vec![Some(mt_sp_sp), None], vec![None, Some(Expr::constant(qinv))]])?;
    let cross = mt_w_sp.lmul(&ww)?.rmul(&eprime)?.sym()?;
    let top = ctil - cross + mt_ww.lmul(&ww)?.rmul(&ww.transpose())?;
    let off_diag = ptv.lmul(&w1x)? + yv.lmul(&ub)?;
    let lmi = Expr::block(&[vec![Some(top), Some(off_diag.clone())], vec![Some(off_diag.transpose()), Some(ptv.clone())]])?;
    model.psd("dual_bellman", lmi, solver.margin)?;
    if d > 0 {
        model.nsd("mtilde_ww", mt_ww, solver.margin)?;
    }
    model.psd("pt", ptv.clone(), solver.margin)?;
    let eig = symmetrize(sigma).symmetric_eigen();
    let half = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt())) * eig.eigenvectors.transpose();
    let epi = Expr::block(&[vec![Some(zv.clone()), Some(Expr::constant(half.clone()))], vec![Some(Expr::constant(half)), Some(ptv)]])?;
    model.psd("epigraph", epi, 0.0)?;
    model.minimize(zv.trace()?)?;

    let (y, layout, status, iters) = solve_model(&model, solver)?;
    let pt = layout.value("Pt", &y)?;
    let yk = layout.value("Y", &y)?;
    let p_n = symmetrize(&pt.clone().try_inverse().ok_or(StepError::Solver(SolveStatus::NumericalFailure))?);
    let k = yk * &p_n;
    let lam_n: Vec<f64> = if s > 0 { layout.value("mu", &y)?.column(0).iter().map(|v| 1.0 / v).collect() } else { Vec::new() };
    finish(q, mset, sigma, &norm, lam_n, k, p_n, Strategy::Dual, status, iters)
}

/// Full-row-rank `F` with `F'F = max(Q, 0)` (negative eigenvalues clipped).
fn clipped_factor(q: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(q).symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > 1e-13 * top).collect();
    let mut f = DMatrix::zeros(keep.len(), q.ncols());
    for (r, &i) in keep.iter().enumerate() {
        f.row_mut(r).copy_from(&(eig.eigenvectors.column(i) * eig.eigenvalues[i].sqrt()).transpose());
    }
    f
}

fn stack(mats: &[&DMatrix<f64>], cols: usize) -> DMatrix<f64> {
    let rows: usize = mats.iter().map(|m| m.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for m in mats {
        out.view_mut((r, 0), (m.nrows(), cols)).copy_from(*m);
        r += m.nrows();
    }
    out
}

/// Factorization-based convexification through the one-way dualization;
/// conservative, but needs only the factors and a full-column-rank `W12`.
pub fn backward_step_canonical(
    q: &PartitionedQuad,
    mset: &MultiplierSet,
    sigma: &DMatrix<f64>,
    solver: &LmiSolver,
) -> Result<BackwardStepResult, StepError> {
    check_sizes(q, mset, sigma)?;
    let (n, m, d) = q.dims();
    let size = q.size();
    let norm = normalize(q);
    let f = clipped_factor(norm.q.matrix());
    let mps: Vec<&DMatrix<f64>> = mset.factors.iter().map(|(p, _)| p).collect();
    let mms: Vec<&DMatrix<f64>> = mset.factors.iter().map(|(_, m)| m).collect();
    let pi1 = stack(&mps, size);
    let pi2 = stack(&mms, size);
    let pi0 = policy_map(n, m, d, &DMatrix::zeros(m, 1 + n));
    let x_cols = pi0.columns(0, 1 + n).into_owned();
    let wsel = pi0.columns(1 + n, d).into_owned();
    let mut umat = DMatrix::zeros(size, m);
    umat.view_mut((1 + n, 0), (m, m)).fill_with_identity();

    let w12 = &pi2 * &wsel;
    if d > 0 {
        let sv = if w12.nrows() >= d { w12.clone().singular_values().min() } else { 0.0 };
        if sv <= 1e-9 {
            return Err(StepError::RankDeficientW12(sv));
        }
    }
    let w12p = left_inverse(&w12).map_err(|_| StepError::RankDeficientW12(0.0))?;
    let (w22, w32) = (&pi1 * &wsel, &f * &wsel);

    let mut model = Model::new();
    let pv = model.var("P", VarShape::Symmetric(1 + n))?;
    let kv = model.var("K", VarShape::Matrix(m, 1 + n))?;
    let s = mset.len();
    // W_k1(K) = Pi^k (Pi0 + U K) on the (1, dx) columns.
    let wk1 = |pik: &DMatrix<f64>| -> Result<Expr, StepError> { Ok(Expr::constant(pik * &x_cols) + kv.lmul(&(pik * &umat))?) };
    let w11 = wk1(&pi2)?;
    let g1_top = wk1(&pi1)? - w11.lmul(&(&w22 * &w12p))?;
    let g1_bot = wk1(&f)? - w11.lmul(&(&w32 * &w12p))?;
    let g2 = stack(&[&(&w22 * &w12p), &(&w32 * &w12p)], w12p.ncols());
    let (np, nf) = (pi1.nrows(), f.nrows());

    let mut d1 = Expr::constant({
        let mut m = DMatrix::zeros(np + nf, np + nf);
        m.view_mut((np, np), (nf, nf)).fill_with_identity();
        m
    });
    let mut g2d2g2 = Expr::zeros(np + nf, np + nf);
    if s > 0 {
        let mu = model.var("mu", VarShape::Vector(s))?;
        model.lower_bound("mu", MU_FLOOR)?;
        let (mut rp, mut rm) = (0, 0);
        for (i, (fp, fm)) in mset.factors.iter().enumerate() {
            let mi = lam_expr(&mu, i);
            let mut ep = DMatrix::zeros(np + nf, np + nf);
            for j in rp..rp + fp.nrows() {
                ep[(j, j)] = 1.0;
            }
            let mut em = DMatrix::zeros(pi2.nrows(), pi2.nrows());
            for j in rm..rm + fm.nrows() {
                em[(j, j)] = 1.0;
            }
            d1 = d1 + Expr::constant(ep).times(&mi)?;
            g2d2g2 = g2d2g2 + Expr::constant(&g2 * em * g2.transpose()).times(&mi)?;
            rp += fp.nrows();
            rm += fm.nrows();
        }
    }
    let g1 = Expr::block(&[vec![Some(g1_top)], vec![Some(g1_bot)]])?;
    let lmi = if np + nf == 0 {
        pv.clone()
    } else {
        Expr::block(&[vec![Some(d1 - g2d2g2), Some(g1.clone())], vec![Some(g1.transpose()), Some(pv.clone())]])?
    };
    model.psd("canonical_bellman", lmi, solver.margin)?;
    model.minimize(pv.lmul(sigma)?.trace()?)?;

    let (y, layout, status, iters) = solve_model(&model, solver)?;
    let p_n = layout.value("P", &y)?;
    let k = layout.value("K", &y)?;
    let lam_n: Vec<f64> = if s > 0 { layout.value("mu", &y)?.column(0).iter().map(|v| 1.0 / v).collect() } else { Vec::new() };
    finish(q, mset, sigma, &norm, lam_n, k, p_n, Strategy::Canonical, status, iters)
}

/// Runs one strategy, or `simple -> dual -> canonical` for `Auto`.
pub fn backward_step(
    q: &PartitionedQuad,
    mset: &MultiplierSet,
    sigma: &DMatrix<f64>,
    choice: StrategyChoice,
    solver: &LmiSolver,
) -> Result<BackwardStepResult, StepError> {
    match choice {
        StrategyChoice::Simple => backward_step_simple(q, mset, sigma, solver),
        StrategyChoice::Dual => backward_step_dual(q, mset, sigma, solver),
        StrategyChoice::Canonical => backward_step_canonical(q, mset, sigma, solver),
        StrategyChoice::Auto => {
            let mut last = None;
            type StepFn = fn(&PartitionedQuad, &MultiplierSet, &DMatrix<f64>, &LmiSolver) -> Result<BackwardStepResult, StepError>;
            let order: [StepFn; 3] = [backward_step_simple, backward_step_dual, backward_step_canonical];
            for step in order {
                match step(q, mset, sigma, solver) {
                    Ok(r) => return Ok(r),
                    // The simple and dual forms are exact, so infeasibility is final.
                    Err(StepError::Infeasible) => return Err(StepError::Infeasible),
                    Err(e) => {
                        log::debug!("strategy fallback: {e}");
                        last = Some(e);
                    }
                }
            }
            Err(last.expect("at least one strategy ran"))
        }
    }
}

#[derive(Debug, Clone)]
pub struct PassOptions {
    pub strategy: StrategyChoice,
    pub qmethod: QMethod,
    /// `Sigma_t = blockdiag(1, rho I)`.
    pub rho: f64,
    /// Regularization floor for the `(dx, du, dw)` block; `None` disables it.
    pub mu_min: Option<f64>,
    pub solver: LmiSolver,
}

impl Default for PassOptions {
    fn default() -> Self {
        PassOptions { strategy: StrategyChoice::Auto, qmethod: QMethod::Linearized, rho: 1e-2, mu_min: None, solver: LmiSolver::default() }
    }
}

/// One backward step's inputs and outputs, for inspection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub strategy: Strategy,
    pub trace: f64,
    pub certificate_margin: f64,
    pub lambda: Vec<f64>,
    pub regularization: f64,
}

#[derive(Debug, Clone)]
pub struct PassResult {
    /// Indexed by time, `t = 0 .. T-1`.
    pub steps: Vec<BackwardStepResult>,
    /// `V_0 .. V_T`, each anchored at the trajectory state.
    pub values: Vec<ValueQuad>,
    pub trace: Vec<StepTrace>,
}

/// Q-function and multipliers at step `t` of `traj` given the next value.
pub fn stage_problem(
    plant: &dyn GeneralizedPlant,
    traj: &Trajectory,
    t: usize,
    v_next: &ValueQuad,
    qmethod: QMethod,
) -> Result<(PartitionedQuad, MultiplierSet), BackwardError> {
    let dims = plant.dims();
    let (x, u) = (&traj.states[t], &traj.inputs[t]);
    let w = DVector::zeros(dims.d);
    let q = match qmethod {
        QMethod::Taylor => taylor_q(plant, x, u, &w, v_next),
        QMethod::Linearized => linearize(plant, x, u, &w).and_then(|lin| {
            let cost = cost_quadratic(plant, x, u)?;
            linearized_q(&lin, &cost, v_next)
        }),
    }
    .map_err(|source| BackwardError::QApprox { t, source })?;
    let mset = if dims.d == 0 {
        MultiplierSet::empty(dims.basis())
    } else {
        let out = linearize_output(plant, x, u, &w).map_err(|source| BackwardError::QApprox { t, source })?;
        let rows = plant.channels();
        let sizes: Vec<usize> = rows.iter().map(|r| r.len()).collect();
        box_multipliers(&out, dims, &sizes, &rows).map_err(|source| BackwardError::Plant { t, source })?
    };
    Ok((q, mset))
}

/// Backward recursion from `V_T` along `traj`.
pub fn run_backward_pass(
    plant: &dyn GeneralizedPlant,
    traj: &Trajectory,
    v_terminal: &ValueQuad,
    opts: &PassOptions,
) -> Result<PassResult, BackwardError> {
    let horizon = plant.horizon();
    if traj.states.len() != horizon + 1 || traj.inputs.len() != horizon {
        return Err(BackwardError::TrajectoryMismatch);
    }
    let n = plant.dims().n;
    let sigma = default_sigma(n, opts.rho);
    let mut values = vec![None; horizon + 1];
    values[horizon] = Some(v_terminal.reanchor(&traj.states[horizon]));
    let mut steps = vec![None; horizon];
    let mut trace = Vec::with_capacity(horizon);
    for t in (0..horizon).rev() {
        let v_next = values[t + 1].as_ref().expect("filled");
        let (q, mset) = stage_problem(plant, traj, t, v_next, opts.qmethod)?;
        let (q, reg) = match opts.mu_min {
            Some(mu) => regularize(&q, mu),
            None => (q, 0.0),
        };
        let r = backward_step(&q, &mset, &sigma, opts.strategy, &opts.solver).map_err(|source| BackwardError::Step { t, source })?;
        let mut v = ValueQuad::new(r.value.clone(), traj.states[t].clone());
        v.certified = is_pd(&r.value);
        trace.push(StepTrace {
            t,
            strategy: r.strategy,
            trace: r.trace,
            certificate_margin: r.certificate_margin,
            lambda: r.lambda.clone(),
            regularization: reg,
        });
        values[t] = Some(v);
        steps[t] = Some(r);
    }
    trace.reverse();
    Ok(PassResult {
        steps: steps.into_iter().map(|s| s.expect("filled")).collect(),
        values: values.into_iter().map(|v| v.expect("filled")).collect(),
        trace,
    })
}
