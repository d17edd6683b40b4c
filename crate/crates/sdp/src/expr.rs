//! Affine matrix expressions over named variables, and their assembly into an
//! [`LmiProblem`].
//!
//! Variables are laid out lexicographically by name, then by basis index. A
//! symmetric `n x n` variable uses the orthonormal basis `E_ii` and
//! `(E_ij + E_ji)/sqrt(2)` for `i < j`, so `p = n(n+1)/2`.

use std::collections::{BTreeMap, HashMap};
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DMatrix;

use crate::problem::{Bound, LmiBlock, LmiProblem, VarInfo};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarShape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
    Symmetric(usize),
}

impl VarShape {
    pub fn dims(&self) -> (usize, usize) {
        match *self {
            VarShape::Scalar => (1, 1),
            VarShape::Vector(n) => (n, 1),
            VarShape::Matrix(r, c) => (r, c),
            VarShape::Symmetric(n) => (n, n),
        }
    }

    pub fn count(&self) -> usize {
        match *self {
            VarShape::Scalar => 1,
            VarShape::Vector(n) => n,
            VarShape::Matrix(r, c) => r * c,
            VarShape::Symmetric(n) => n * (n + 1) / 2,
        }
    }

    /// Basis matrix number `k`.
    pub fn basis(&self, k: usize) -> DMatrix<f64> {
        let (r, c) = self.dims();
        let mut m = DMatrix::zeros(r, c);
        match *self {
            VarShape::Scalar | VarShape::Vector(_) => m[(k, 0)] = 1.0,
            VarShape::Matrix(_, cols) => m[(k / cols, k % cols)] = 1.0,
            VarShape::Symmetric(n) => {
                let (i, j) = sym_index(n, k);
                if i == j {
                    m[(i, i)] = 1.0;
                } else {
                    let v = std::f64::consts::FRAC_1_SQRT_2;
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
        }
        m
    }

    /// Coordinates of `value` in this basis.
    pub fn coordinates(&self, value: &DMatrix<f64>) -> Vec<f64> {
        (0..self.count()).map(|k| self.basis(k).component_mul(value).sum()).collect()
    }
}

/// Row-major upper-triangle position of symmetric basis element `k`.
fn sym_index(n: usize, mut k: usize) -> (usize, usize) {
    for i in 0..n {
        let len = n - i;
        if k < len {
            return (i, i + k);
        }
        k -= len;
    }
    panic!("symmetric basis index out of range");
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AssembleError {
    #[error("product of two variable-dependent expressions is not affine")]
    NonAffineExpression,
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("variable `{0}` declared twice with different shapes")]
    Redeclared(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bounds are only supported on scalar and vector variables (`{0}`)")]
    UnsupportedBound(String),
}

type Key = (String, usize);

/// `constant + sum_k y_k * terms[k]`, a matrix-valued affine function.
#[derive(Clone, Debug)]
pub struct Expr {
    rows: usize,
    cols: usize,
    constant: DMatrix<f64>,
    terms: BTreeMap<Key, DMatrix<f64>>,
}

impl Expr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Expr { rows, cols, constant: DMatrix::zeros(rows, cols), terms: BTreeMap::new() }
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        Expr { rows: m.nrows(), cols: m.ncols(), constant: m, terms: BTreeMap::new() }
    }

    pub fn identity(n: usize) -> Self {
        Expr::constant(DMatrix::identity(n, n))
    }

    pub fn scalar(v: f64) -> Self {
        Expr::constant(DMatrix::from_element(1, 1, v))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn constant_part(&self) -> &DMatrix<f64> {
        &self.constant
    }

    pub fn variable_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.terms.keys().map(|k| k.0.clone()).collect();
        v.dedup();
        v
    }

    fn map(&self, rows: usize, cols: usize, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Self {
        Expr {
            rows,
            cols,
            constant: f(&self.constant),
            terms: self.terms.iter().map(|(k, m)| (k.clone(), f(m))).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        self.map(self.cols, self.rows, |m| m.transpose())
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(self.rows, self.cols, |m| m * a)
    }

    /// `A * self`.
    pub fn lmul(&self, a: &DMatrix<f64>) -> Result<Self, AssembleError> {
        if a.ncols() != self.rows {
            return Err(AssembleError::DimensionMismatch(format!("{}x{} * {}x{}", a.nrows(), a.ncols(), self.rows, self.cols)));
        }
        Ok(self.map(a.nrows(), self.cols, |m| a * m))
    }

    /// `self * B`.
    pub fn rmul(&self, b: &DMatrix<f64>) -> Result<Self, AssembleError> {
        if b.nrows() != self.cols {
            return Err(AssembleError::DimensionMismatch(format!("{}x{} * {}x{}", self.rows, self.cols, b.nrows(), b.ncols())));
        }
        Ok(self.map(self.rows, b.ncols(), |m| m * b))
    }

    /// Product of two expressions; at least one side must be constant.
    pub fn times(&self, other: &Expr) -> Result<Self, AssembleError> {
        // 1x1 operands broadcast as scalars.
        if self.shape() == (1, 1) && other.rows != 1 {
            return other.times_scalar(self);
        }
        if other.shape() == (1, 1) && self.cols != 1 {
            return self.times_scalar(other);
        }
        if self.is_constant() {
            other.lmul(&self.constant)
        } else if other.is_constant() {
            self.rmul(&other.constant)
        } else {
            Err(AssembleError::NonAffineExpression)
        }
    }

    fn times_scalar(&self, s: &Expr) -> Result<Self, AssembleError> {
        if s.is_constant() {
            Ok(self.scale(s.constant[(0, 0)]))
        } else if self.is_constant() {
            Ok(s.map(self.rows, self.cols, |m| &self.constant * m[(0, 0)]))
        } else {
            Err(AssembleError::NonAffineExpression)
        }
    }

    /// `self + self'`.
    pub fn sym(&self) -> Result<Self, AssembleError> {
        self.try_add(&self.transpose())
    }

    pub fn trace(&self) -> Result<Self, AssembleError> {
        if self.rows != self.cols {
            return Err(AssembleError::DimensionMismatch("trace of non-square expression".into()));
        }
        Ok(self.map(1, 1, |m| DMatrix::from_element(1, 1, m.trace())))
    }

    /// Sub-matrix with the given row and column index lists.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        self.map(rows.len(), cols.len(), |m| DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])]))
    }

    pub fn try_add(&self, other: &Expr) -> Result<Self, AssembleError> {
        if self.shape() != other.shape() {
            return Err(AssembleError::DimensionMismatch(format!("{:?} + {:?}", self.shape(), other.shape())));
        }
        let mut out = self.clone();
        out.constant += &other.constant;
        for (k, m) in &other.terms {
            match out.terms.get_mut(k) {
                Some(t) => *t += m,
                None => {
                    out.terms.insert(k.clone(), m.clone());
                }
            }
        }
        Ok(out)
    }

    /// Block matrix from a grid of expressions; `None` entries are zero blocks
    /// whose size is inferred from their row and column.
    pub fn block(grid: &[Vec<Option<Expr>>]) -> Result<Self, AssembleError> {
        let nr = grid.len();
        if nr == 0 {
            return Ok(Expr::zeros(0, 0));
        }
        let nc = grid[0].len();
        let mut heights = vec![None; nr];
        let mut widths = vec![None; nc];
        for (i, row) in grid.iter().enumerate() {
            if row.len() != nc {
                return Err(AssembleError::DimensionMismatch("ragged block grid".into()));
            }
            for (j, e) in row.iter().enumerate() {
                if let Some(e) = e {
                    let (r, c) = e.shape();
                    for (slot, v) in [(&mut heights[i], r), (&mut widths[j], c)] {
                        match *slot {
                            None => *slot = Some(v),
                            Some(w) if w != v => {
                                return Err(AssembleError::DimensionMismatch(format!("block ({i}, {j}) is {r}x{c}")))
                            }
                            _ => {}
                        }
                    }
                }
            }
        }
        let heights: Vec<usize> = heights
            .into_iter()
            .map(|h| h.ok_or_else(|| AssembleError::DimensionMismatch("empty block row".into())))
            .collect::<Result<_, _>>()?;
        let widths: Vec<usize> = widths
            .into_iter()
            .map(|w| w.ok_or_else(|| AssembleError::DimensionMismatch("empty block column".into())))
            .collect::<Result<_, _>>()?;
        let rows: usize = heights.iter().sum();
        let cols: usize = widths.iter().sum();
        let mut out = Expr::zeros(rows, cols);
        let mut r0 = 0;
        for (i, row) in grid.iter().enumerate() {
            let mut c0 = 0;
            for (j, e) in row.iter().enumerate() {
                if let Some(e) = e {
                    out.constant.view_mut((r0, c0), (heights[i], widths[j])).copy_from(&e.constant);
                    for (k, m) in &e.terms {
                        let t = out.terms.entry(k.clone()).or_insert_with(|| DMatrix::zeros(rows, cols));
                        t.view_mut((r0, c0), (heights[i], widths[j])).copy_from(m);
                    }
                }
                c0 += widths[j];
            }
            r0 += heights[i];
        }
        Ok(out)
    }

    /// Value at an assignment of every referenced variable.
    pub fn eval(&self, values: &HashMap<String, DMatrix<f64>>, model: &Model) -> Result<DMatrix<f64>, AssembleError> {
        let mut m = self.constant.clone();
        for ((name, k), t) in &self.terms {
            let shape = model.shape(name)?;
            let v = values.get(name).ok_or_else(|| AssembleError::UnknownVariable(name.clone()))?;
            let y = shape.basis(*k).component_mul(v).sum();
            m += t * y;
        }
        Ok(m)
    }
}

impl Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        self.try_add(&rhs).expect("expression shapes must agree")
    }
}

impl Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        self.try_add(&rhs.scale(-1.0)).expect("expression shapes must agree")
    }
}

impl Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        self.scale(-1.0)
    }
}

impl Mul<f64> for Expr {
    type Output = Expr;
    fn mul(self, a: f64) -> Expr {
        self.scale(a)
    }
}

struct Constraint {
    label: String,
    expr: Expr,
    margin: f64,
}

/// Declared variables plus constraints; turns into an [`LmiProblem`].
#[derive(Default)]
pub struct Model {
    vars: BTreeMap<String, VarShape>,
    constraints: Vec<Constraint>,
    objective: Option<Expr>,
    lower: Vec<(String, f64)>,
}

/// Column ranges of every variable in the assembled decision vector.
#[derive(Clone, Debug)]
pub struct VarLayout {
    offsets: BTreeMap<String, (usize, VarShape)>,
    pub dim: usize,
}

impl VarLayout {
    pub fn offset(&self, name: &str) -> Option<usize> {
        self.offsets.get(name).map(|v| v.0)
    }

    /// Reconstruct the matrix value of `name` from the decision vector.
    pub fn value(&self, name: &str, y: &[f64]) -> Result<DMatrix<f64>, AssembleError> {
        let (o, shape) = self.offsets.get(name).ok_or_else(|| AssembleError::UnknownVariable(name.to_string()))?;
        let (r, c) = shape.dims();
        let mut m = DMatrix::zeros(r, c);
        for k in 0..shape.count() {
            m += shape.basis(k) * y[o + k];
        }
        Ok(m)
    }

    /// Decision vector for a full assignment.
    pub fn pack(&self, values: &HashMap<String, DMatrix<f64>>) -> Result<Vec<f64>, AssembleError> {
        let mut y = vec![0.0; self.dim];
        for (name, (o, shape)) in &self.offsets {
            let v = values.get(name).ok_or_else(|| AssembleError::UnknownVariable(name.clone()))?;
            for (k, c) in shape.coordinates(v).into_iter().enumerate() {
                y[o + k] = c;
            }
        }
        Ok(y)
    }
}

impl Model {
    pub fn new() -> Self {
        Model::default()
    }

    /// Declares (or re-fetches) a variable and returns it as an expression.
    pub fn var(&mut self, name: &str, shape: VarShape) -> Result<Expr, AssembleError> {
        if let Some(s) = self.vars.get(name) {
            if *s != shape {
                return Err(AssembleError::Redeclared(name.to_string()));
            }
        } else {
            self.vars.insert(name.to_string(), shape);
        }
        let (r, c) = shape.dims();
        let mut e = Expr::zeros(r, c);
        for k in 0..shape.count() {
            e.terms.insert((name.to_string(), k), shape.basis(k));
        }
        Ok(e)
    }

    pub fn shape(&self, name: &str) -> Result<VarShape, AssembleError> {
        self.vars.get(name).copied().ok_or_else(|| AssembleError::UnknownVariable(name.to_string()))
    }

    /// `expr >= margin * I` (expression is symmetrized).
    pub fn psd(&mut self, label: &str, expr: Expr, margin: f64) -> Result<(), AssembleError> {
        if expr.rows != expr.cols {
            return Err(AssembleError::DimensionMismatch(format!("constraint `{label}` is not square")));
        }
        self.constraints.push(Constraint { label: label.to_string(), expr, margin });
        Ok(())
    }

    /// `expr <= -margin * I`.
    pub fn nsd(&mut self, label: &str, expr: Expr, margin: f64) -> Result<(), AssembleError> {
        self.psd(label, -expr, margin)
    }

    /// Minimize a scalar (1x1) expression.
    pub fn minimize(&mut self, expr: Expr) -> Result<(), AssembleError> {
        if expr.shape() != (1, 1) {
            return Err(AssembleError::DimensionMismatch("objective must be 1x1".into()));
        }
        self.objective = Some(expr);
        Ok(())
    }

    /// Element-wise lower bound on a scalar or vector variable.
    pub fn lower_bound(&mut self, name: &str, value: f64) -> Result<(), AssembleError> {
        match self.shape(name)? {
            VarShape::Scalar | VarShape::Vector(_) => {
                self.lower.push((name.to_string(), value));
                Ok(())
            }
            _ => Err(AssembleError::UnsupportedBound(name.to_string())),
        }
    }

    pub fn layout(&self) -> VarLayout {
        let mut offsets = BTreeMap::new();
        let mut o = 0;
        for (name, shape) in &self.vars {
            offsets.insert(name.clone(), (o, *shape));
            o += shape.count();
        }
        VarLayout { offsets, dim: o }
    }

    pub fn assemble(&self) -> Result<(LmiProblem, VarLayout), AssembleError> {
        let layout = self.layout();
        let index = |k: &Key| -> Result<usize, AssembleError> {
            layout.offset(&k.0).map(|o| o + k.1).ok_or_else(|| AssembleError::UnknownVariable(k.0.clone()))
        };
        let mut prob = LmiProblem::new(layout.dim);
        for (name, (o, shape)) in &layout.offsets {
            for k in 0..shape.count() {
                prob.variables.push(VarInfo { name: format!("{name}[{k}]"), index: o + k });
            }
        }
        if let Some(obj) = &self.objective {
            for (k, m) in &obj.terms {
                prob.objective[index(k)?] += m[(0, 0)];
            }
        }
        for c in &self.constraints {
            let mut fi = Vec::with_capacity(c.expr.terms.len());
            for (k, m) in &c.expr.terms {
                fi.push((index(k)?, m.clone()));
            }
            prob.blocks.push(LmiBlock::from_dense(c.label.clone(), c.margin, &c.expr.constant, &fi));
        }
        for (name, v) in &self.lower {
            let (o, shape) = layout.offsets[name];
            for k in 0..shape.count() {
                prob.bounds.push(Bound { var: o + k, lower: *v });
            }
        }
        Ok((prob, layout))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_times_generator() {
        let m1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let mut model = Model::new();
        let lam = model.var("lambda", VarShape::Scalar).unwrap();
        let e = Expr::constant(m1.clone()).times(&lam).unwrap() + Expr::constant(q.clone());
        model.psd("c", e, 0.0).unwrap();
        let (p, _) = model.assemble().unwrap();
        assert_eq!(p.dim, 1);
        assert_eq!(p.blocks[0].coefficient(Some(0)), m1);
        assert_eq!(p.blocks[0].coefficient(None), q);
    }

    #[test]
    fn symmetric_basis_and_trace_objective() {
        let mut model = Model::new();
        let pv = model.var("P", VarShape::Symmetric(3)).unwrap();
        model.minimize(pv.trace().unwrap()).unwrap();
        let (p, layout) = model.assemble().unwrap();
        assert_eq!(p.dim, 6);
        // Diagonal basis elements carry weight 1, off-diagonals 0.
        assert_eq!(p.objective, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        // Orthonormality.
        let s = VarShape::Symmetric(3);
        for a in 0..6 {
            for b in 0..6 {
                let ip = s.basis(a).component_mul(&s.basis(b)).sum();
                assert!((ip - if a == b { 1.0 } else { 0.0 }).abs() < 1e-15);
            }
        }
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        let mut vals = HashMap::new();
        vals.insert("P".to_string(), x.clone());
        let y = layout.pack(&vals).unwrap();
        assert!((layout.value("P", &y).unwrap() - x).norm() < 1e-14);
    }

    #[test]
    fn lexicographic_ordering() {
        let mut model = Model::new();
        model.var("b", VarShape::Scalar).unwrap();
        model.var("a", VarShape::Vector(2)).unwrap();
        let l = model.layout();
        assert_eq!(l.offset("a"), Some(0));
        assert_eq!(l.offset("b"), Some(2));
    }

    #[test]
    fn non_affine_product_rejected() {
        let mut model = Model::new();
        let a = model.var("a", VarShape::Scalar).unwrap();
        let b = model.var("b", VarShape::Scalar).unwrap();
        assert_eq!(a.times(&b).unwrap_err(), AssembleError::NonAffineExpression);
    }

    #[test]
    fn unknown_variable_rejected() {
        let mut other = Model::new();
        let x = other.var("x", VarShape::Scalar).unwrap();
        let mut model = Model::new();
        model.psd("c", x, 0.0).unwrap();
        assert_eq!(model.assemble().unwrap_err(), AssembleError::UnknownVariable("x".into()));
    }

    #[test]
    fn block_assembly_and_eval_roundtrip() {
        let mut model = Model::new();
        let k = model.var("K", VarShape::Matrix(1, 2)).unwrap();
        let p = model.var("P", VarShape::Symmetric(2)).unwrap();
        let e = Expr::block(&[vec![Some(p.clone()), Some(k.transpose())], vec![Some(k.clone()), Some(Expr::scalar(-1.0))]]).unwrap();
        model.psd("c", e.clone(), 0.0).unwrap();
        let (prob, layout) = model.assemble().unwrap();
        let mut vals = HashMap::new();
        vals.insert("K".to_string(), DMatrix::from_row_slice(1, 2, &[0.3, -0.7]));
        vals.insert("P".to_string(), DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 1.0]));
        let direct = e.eval(&vals, &model).unwrap();
        let y = layout.pack(&vals).unwrap();
        let assembled = prob.blocks[0].evaluate(&y);
        assert!((direct - assembled).norm() < 1e-12);
    }
}
