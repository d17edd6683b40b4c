use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// One coefficient `F_i[row, col] = value`. `var == None` is the constant term `F_0`.
/// Only the upper triangle (`row <= col`) is stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub var: Option<usize>,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Affine symmetric block `F_0 + sum_i y_i F_i`, required `>= margin * I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmiBlock {
    pub label: String,
    pub size: usize,
    pub margin: f64,
    pub entries: Vec<Entry>,
}

impl LmiBlock {
    pub fn new(label: impl Into<String>, size: usize, margin: f64) -> Self {
        LmiBlock { label: label.into(), size, margin, entries: Vec::new() }
    }

    /// Adds `value` at (row, col) and, implicitly, at (col, row).
    pub fn push(&mut self, var: Option<usize>, row: usize, col: usize, value: f64) {
        if value == 0.0 {
            return;
        }
        let (r, c) = if row <= col { (row, col) } else { (col, row) };
        self.entries.push(Entry { var, row: r, col: c, value });
    }

    /// Builds a block from dense coefficient matrices (upper triangle read).
    pub fn from_dense(label: impl Into<String>, margin: f64, f0: &DMatrix<f64>, fi: &[(usize, DMatrix<f64>)]) -> Self {
        let n = f0.nrows();
        let mut b = LmiBlock::new(label, n, margin);
        let mut add = |var: Option<usize>, m: &DMatrix<f64>| {
            for c in 0..n {
                for r in 0..=c {
                    b.push(var, r, c, 0.5 * (m[(r, c)] + m[(c, r)]));
                }
            }
        };
        add(None, f0);
        for (i, m) in fi {
            add(Some(*i), m);
        }
        b
    }

    /// Dense coefficient matrix for `var` (`None` = constant term).
    pub fn coefficient(&self, var: Option<usize>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.size, self.size);
        for e in self.entries.iter().filter(|e| e.var == var) {
            m[(e.row, e.col)] += e.value;
            if e.row != e.col {
                m[(e.col, e.row)] += e.value;
            }
        }
        m
    }

    /// `F_0 + sum y_i F_i` (without the margin).
    pub fn evaluate(&self, y: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.size, self.size);
        for e in &self.entries {
            let v = match e.var {
                None => e.value,
                Some(i) => e.value * y[i],
            };
            m[(e.row, e.col)] += v;
            if e.row != e.col {
                m[(e.col, e.row)] += v;
            }
        }
        m
    }
}

/// Lower bound `y[var] >= lower`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub var: usize,
    pub lower: f64,
}

/// A named scalar column of the decision vector (for dumps and diagnostics).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarInfo {
    pub name: String,
    pub index: usize,
}

/// minimize `c . y` subject to every block `>= margin * I` and the bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmiProblem {
    pub dim: usize,
    pub objective: Vec<f64>,
    pub blocks: Vec<LmiBlock>,
    pub bounds: Vec<Bound>,
    #[serde(default)]
    pub variables: Vec<VarInfo>,
}

#[derive(Debug, thiserror::Error)]
pub enum ProblemError {
    #[error("block `{block}` references variable {var} but the problem has {dim}")]
    VariableOutOfRange { block: String, var: usize, dim: usize },
    #[error("block `{block}` entry ({row}, {col}) outside size {size}")]
    EntryOutOfRange { block: String, row: usize, col: usize, size: usize },
    #[error("objective has length {got}, expected {dim}")]
    ObjectiveLength { got: usize, dim: usize },
    #[error("non-finite data in {0}")]
    NonFinite(String),
}

pub const DUMP_SCHEMA: &str = "rddp-lmi/1";

#[derive(Serialize, Deserialize)]
struct Dump {
    schema: String,
    #[serde(flatten)]
    problem: LmiProblem,
}

impl LmiProblem {
    pub fn new(dim: usize) -> Self {
        LmiProblem { dim, objective: vec![0.0; dim], blocks: Vec::new(), bounds: Vec::new(), variables: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        if self.objective.len() != self.dim {
            return Err(ProblemError::ObjectiveLength { got: self.objective.len(), dim: self.dim });
        }
        if self.objective.iter().any(|v| !v.is_finite()) {
            return Err(ProblemError::NonFinite("objective".into()));
        }
        for b in &self.blocks {
            for e in &b.entries {
                if let Some(v) = e.var {
                    if v >= self.dim {
                        return Err(ProblemError::VariableOutOfRange { block: b.label.clone(), var: v, dim: self.dim });
                    }
                }
                if e.row >= b.size || e.col >= b.size {
                    return Err(ProblemError::EntryOutOfRange { block: b.label.clone(), row: e.row, col: e.col, size: b.size });
                }
                if !e.value.is_finite() {
                    return Err(ProblemError::NonFinite(b.label.clone()));
                }
            }
        }
        for bd in &self.bounds {
            if bd.var >= self.dim {
                return Err(ProblemError::VariableOutOfRange { block: "bounds".into(), var: bd.var, dim: self.dim });
            }
        }
        Ok(())
    }

    /// Smallest eigenvalue of `F(y) - margin*I` over all blocks, and of the bound slacks.
    pub fn residual(&self, y: &[f64]) -> f64 {
        let mut worst = f64::INFINITY;
        for b in &self.blocks {
            if b.size == 0 {
                continue;
            }
            let m = b.evaluate(y);
            let e = m.symmetric_eigenvalues().min() - b.margin;
            worst = worst.min(e);
        }
        for bd in &self.bounds {
            worst = worst.min(y[bd.var] - bd.lower);
        }
        worst
    }

    pub fn objective_value(&self, y: &[f64]) -> f64 {
        self.objective.iter().zip(y).map(|(c, v)| c * v).sum()
    }

    /// JSON debug dump: variable table plus flattened upper-triangle triplets per block.
    pub fn to_json(&self) -> String {
        let d = Dump { schema: DUMP_SCHEMA.to_string(), problem: self.clone() };
        serde_json::to_string_pretty(&d).expect("problem serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let d: Dump = serde_json::from_str(s)?;
        Ok(d.problem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_roundtrip_and_evaluate() {
        let f0 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, -1.0]);
        let f1 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 3.0]);
        let b = LmiBlock::from_dense("a", 0.0, &f0, &[(0, f1.clone())]);
        assert_eq!(b.coefficient(None), f0);
        assert_eq!(b.coefficient(Some(0)), f1);
        let m = b.evaluate(&[2.0]);
        assert_eq!(m, &f0 + &f1 * 2.0);
    }

    #[test]
    fn json_dump_roundtrip() {
        let mut p = LmiProblem::new(1);
        p.objective[0] = 1.0;
        let mut b = LmiBlock::new("x", 2, 1e-7);
        b.push(Some(0), 0, 0, 1.0);
        b.push(Some(0), 1, 1, 1.0);
        b.push(None, 1, 0, 1.0);
        p.blocks.push(b);
        p.bounds.push(Bound { var: 0, lower: 0.0 });
        let s = p.to_json();
        assert!(s.contains(DUMP_SCHEMA));
        let q = LmiProblem::from_json(&s).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn validate_catches_bad_index() {
        let mut p = LmiProblem::new(1);
        let mut b = LmiBlock::new("x", 1, 0.0);
        b.push(Some(3), 0, 0, 1.0);
        p.blocks.push(b);
        assert!(matches!(p.validate(), Err(ProblemError::VariableOutOfRange { .. })));
    }
}
