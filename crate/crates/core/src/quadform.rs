//! Partitioned quadratic forms over the basis `(1, dx, du, dw)`, Schur
//! complements and the two dualization tests.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Relative threshold used for every strict definiteness test.
pub const DEF_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuadError {
    #[error("block dimensions {dims:?} do not match matrix size {size}")]
    DimensionMismatch { dims: (usize, usize, usize), size: usize },
    #[error("pivot block is singular (condition number {cond:.3e})")]
    SingularPivot { cond: f64 },
    #[error("pivot block is not {expected:?} definite")]
    WrongSign { expected: Sign },
    #[error("quadratic is not concave in dw (largest eigenvalue of Q44 is {max_eig:.3e})")]
    NotConcaveInW { max_eig: f64 },
    #[error("P is singular")]
    SingularP,
    #[error("W1 is rank deficient (smallest singular value {sigma_min:.3e})")]
    RankDeficientW1 { sigma_min: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    One,
    X,
    U,
    W,
}

fn two_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().symmetric_eigenvalues().iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    symmetrize(m).symmetric_eigenvalues().min()
}

pub fn max_eig(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::NEG_INFINITY;
    }
    symmetrize(m).symmetric_eigenvalues().max()
}

/// `m > 0` with the relative margin `1e-9 (1 + |m|_2)`. Empty matrices count as definite.
pub fn is_pd(m: &DMatrix<f64>) -> bool {
    m.is_empty() || min_eig(m) >= DEF_TOL * (1.0 + two_norm(m))
}

pub fn is_nd(m: &DMatrix<f64>) -> bool {
    m.is_empty() || max_eig(m) <= -DEF_TOL * (1.0 + two_norm(m))
}

/// Symmetric matrix over `(1, dx, du, dw)` with dimensions `(1, n, m, d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedQuad {
    mat: DMatrix<f64>,
    n: usize,
    m: usize,
    d: usize,
}

impl PartitionedQuad {
    /// Symmetrizes `mat` on construction.
    pub fn new(mat: DMatrix<f64>, n: usize, m: usize, d: usize) -> Result<Self, QuadError> {
        let size = 1 + n + m + d;
        if mat.nrows() != size || mat.ncols() != size {
            return Err(QuadError::DimensionMismatch { dims: (n, m, d), size: mat.nrows() });
        }
        Ok(PartitionedQuad { mat: symmetrize(&mat), n, m, d })
    }

    pub fn zeros(n: usize, m: usize, d: usize) -> Self {
        let s = 1 + n + m + d;
        PartitionedQuad { mat: DMatrix::zeros(s, s), n, m, d }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.m, self.d)
    }

    pub fn size(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.mat
    }

    pub fn range(&self, b: Block) -> Range<usize> {
        let (n, m, d) = (self.n, self.m, self.d);
        match b {
            Block::One => 0..1,
            Block::X => 1..1 + n,
            Block::U => 1 + n..1 + n + m,
            Block::W => 1 + n + m..1 + n + m + d,
        }
    }

    pub fn block(&self, r: Block, c: Block) -> DMatrix<f64> {
        let (r, c) = (self.range(r), self.range(c));
        self.mat.view((r.start, c.start), (r.len(), c.len())).into_owned()
    }

    pub fn q11(&self) -> f64 {
        self.mat[(0, 0)]
    }

    /// Returns `self + sum_i lam_i M_i`.
    pub fn with_multipliers(&self, lam: &[f64], gens: &[DMatrix<f64>]) -> Self {
        let mut mat = self.mat.clone();
        for (l, g) in lam.iter().zip(gens) {
            mat += g * *l;
        }
        PartitionedQuad { mat: symmetrize(&mat), ..*self }
    }

    /// Adds `eps` to the diagonal of one block.
    pub fn shift_block(&self, b: Block, eps: f64) -> Self {
        let mut out = self.clone();
        for i in self.range(b) {
            out.mat[(i, i)] += eps;
        }
        out
    }

    /// Evaluates `xi' Q xi` with `xi = (1, dx, du, dw)`.
    pub fn value(&self, dx: &DVector<f64>, du: &DVector<f64>, dw: &DVector<f64>) -> f64 {
        let mut xi = DVector::zeros(self.size());
        xi[0] = 1.0;
        xi.rows_mut(1, self.n).copy_from(dx);
        xi.rows_mut(1 + self.n, self.m).copy_from(du);
        xi.rows_mut(1 + self.n + self.m, self.d).copy_from(dw);
        (xi.transpose() * &self.mat * &xi)[(0, 0)]
    }

    /// Schur complement with respect to `block`. The remaining rows keep their
    /// original order, e.g. eliminating `W` leaves a matrix over `(1, dx, du)`.
    pub fn eliminate(&self, block: Block, sign: Sign) -> Result<DMatrix<f64>, QuadError> {
        let piv: Vec<usize> = self.range(block).collect();
        schur_eliminate(&self.mat, &piv, sign)
    }
}

/// `A - B D^{-1} B'` where `D` is the principal submatrix on `pivot`.
pub fn schur_eliminate(mat: &DMatrix<f64>, pivot: &[usize], sign: Sign) -> Result<DMatrix<f64>, QuadError> {
    let keep: Vec<usize> = (0..mat.nrows()).filter(|i| !pivot.contains(i)).collect();
    let a = mat.select_rows(&keep).select_columns(&keep);
    if pivot.is_empty() {
        return Ok(a);
    }
    let b = mat.select_rows(&keep).select_columns(pivot);
    let d = symmetrize(&mat.select_rows(pivot).select_columns(pivot));
    let eig = d.clone().symmetric_eigenvalues();
    let big = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let small = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    let cond = if small > 0.0 { big / small } else { f64::INFINITY };
    if cond > 1e12 {
        return Err(QuadError::SingularPivot { cond });
    }
    let ok = match sign {
        Sign::Positive => eig.min() > 0.0,
        Sign::Negative => eig.max() < 0.0,
    };
    if !ok {
        return Err(QuadError::WrongSign { expected: sign });
    }
    let dinv_bt = d.lu().solve(&b.transpose()).ok_or(QuadError::SingularPivot { cond: f64::INFINITY })?;
    Ok(symmetrize(&(a - b * dinv_bt)))
}

/// Maximizer of the quadratic over `dw`: returns the `d x (1+n+m)` matrix `G`
/// with `dw* = G (1, dx, du)`.
pub fn worst_case_delta_w(qbar: &PartitionedQuad) -> Result<DMatrix<f64>, QuadError> {
    let (n, m, d) = qbar.dims();
    if d == 0 {
        return Ok(DMatrix::zeros(0, 1 + n + m));
    }
    let q44 = qbar.block(Block::W, Block::W);
    let hi = max_eig(&q44);
    if hi >= -1e-9 {
        return Err(QuadError::NotConcaveInW { max_eig: hi });
    }
    let rest = qbar.matrix().view((1 + n + m, 0), (d, 1 + n + m)).into_owned();
    let sol = q44.lu().solve(&rest).ok_or(QuadError::SingularPivot { cond: f64::INFINITY })?;
    Ok(-sol)
}

/// Value function over `(1, dx)` anchored at a state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueQuad {
    pub mat: DMatrix<f64>,
    pub anchor: DVector<f64>,
    pub certified: bool,
}

impl ValueQuad {
    pub fn new(mat: DMatrix<f64>, anchor: DVector<f64>) -> Self {
        ValueQuad { mat: symmetrize(&mat), anchor, certified: false }
    }

    pub fn n(&self) -> usize {
        self.anchor.len()
    }

    pub fn p11(&self) -> f64 {
        self.mat[(0, 0)]
    }

    pub fn p12(&self) -> DVector<f64> {
        self.mat.view((1, 0), (self.n(), 1)).column(0).into_owned()
    }

    pub fn p22(&self) -> DMatrix<f64> {
        let n = self.n();
        self.mat.view((1, 1), (n, n)).into_owned()
    }

    /// `(1, x - anchor)' P (1, x - anchor)`.
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        let dx = x - &self.anchor;
        let p12 = self.p12();
        self.p11() + 2.0 * p12.dot(&dx) + (dx.transpose() * self.p22() * &dx)[(0, 0)]
    }

    /// The same quadratic function expressed around a new anchor.
    pub fn reanchor(&self, anchor: &DVector<f64>) -> ValueQuad {
        let n = self.n();
        let mut e = DMatrix::<f64>::identity(1 + n, 1 + n);
        let shift = anchor - &self.anchor;
        e.view_mut((1, 0), (n, 1)).copy_from(&shift);
        ValueQuad {
            mat: symmetrize(&(e.transpose() * &self.mat * &e)),
            anchor: anchor.clone(),
            certified: self.certified,
        }
    }
}

/// Truth values of a primal/dual pair of matrix inequalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualityCheck {
    pub primal: bool,
    pub dual: bool,
}

fn split(p: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let l = p.nrows() - k;
    (p.view((0, 0), (k, k)).into_owned(), p.view((k, k), (l, l)).into_owned())
}

fn invert(p: &DMatrix<f64>) -> Result<DMatrix<f64>, QuadError> {
    let sv = p.clone().singular_values();
    let (lo, hi) = (sv.min(), sv.max());
    if hi == 0.0 || lo <= 1e-12 * hi {
        return Err(QuadError::SingularP);
    }
    p.clone().try_inverse().map(|m| symmetrize(&m)).ok_or(QuadError::SingularP)
}

/// Primal: `(I; W)' P (I; W) < 0` and `(0; I)' P (0; I) > 0`.
/// Dual: `(W'; -I)' P^{-1} (W'; -I) > 0` and `(I; 0)' P^{-1} (I; 0) < 0`.
/// `W` is `l x k` with `P` of size `k + l`.
pub fn dualize_equiv(p: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DualityCheck, QuadError> {
    let (l, k) = w.shape();
    if p.nrows() != k + l {
        return Err(QuadError::DimensionMismatch { dims: (k, l, 0), size: p.nrows() });
    }
    let p = symmetrize(p);
    let pinv = invert(&p)?;
    let mut iw = DMatrix::zeros(k + l, k);
    iw.view_mut((0, 0), (k, k)).fill_with_identity();
    iw.view_mut((k, 0), (l, k)).copy_from(w);
    let mut wt = DMatrix::zeros(k + l, l);
    wt.view_mut((0, 0), (k, l)).copy_from(&w.transpose());
    wt.view_mut((k, 0), (l, l)).copy_from(&(-DMatrix::<f64>::identity(l, l)));
    let (_, p22) = split(&p, k);
    let (d11, _) = split(&pinv, k);
    let primal = is_nd(&(iw.transpose() * &p * &iw)) && is_pd(&p22);
    let dual = is_pd(&(wt.transpose() * &pinv * &wt)) && is_nd(&d11);
    Ok(DualityCheck { primal, dual })
}

/// `(W1' W1)^{-1} W1'`, requiring full column rank.
pub fn left_inverse(w1: &DMatrix<f64>) -> Result<DMatrix<f64>, QuadError> {
    if w1.ncols() == 0 {
        return Ok(DMatrix::zeros(0, w1.nrows()));
    }
    let sv = w1.clone().singular_values();
    let sigma_min = if w1.nrows() < w1.ncols() { 0.0 } else { sv.min() };
    if sigma_min <= 1e-9 {
        return Err(QuadError::RankDeficientW1 { sigma_min });
    }
    let g = w1.transpose() * w1;
    g.cholesky()
        .map(|c| c.solve(&w1.transpose()))
        .ok_or(QuadError::RankDeficientW1 { sigma_min })
}

/// One-way dualization: the dual pair built from `W2 W1^+` implies the primal
/// pair `(W1; W2)' P (W1; W2) < 0`, `(0; I)' P (0; I) > 0`. `W1` is `k x c`,
/// `W2` is `l x c`, `P` has size `k + l`.
pub fn dualize_oneway(p: &DMatrix<f64>, w1: &DMatrix<f64>, w2: &DMatrix<f64>) -> Result<DualityCheck, QuadError> {
    let k = w1.nrows();
    let l = w2.nrows();
    if p.nrows() != k + l || w1.ncols() != w2.ncols() {
        return Err(QuadError::DimensionMismatch { dims: (k, l, w1.ncols()), size: p.nrows() });
    }
    let pinv_l = left_inverse(w1)?;
    let p = symmetrize(p);
    let dual = dualize_equiv(&p, &(w2 * pinv_l))?.dual;
    let mut ww = DMatrix::zeros(k + l, w1.ncols());
    ww.view_mut((0, 0), (k, w1.ncols())).copy_from(w1);
    ww.view_mut((k, 0), (l, w1.ncols())).copy_from(w2);
    let (_, p22) = split(&p, k);
    let primal = is_nd(&(ww.transpose() * &p * &ww)) && is_pd(&p22);
    Ok(DualityCheck { primal, dual })
}
