//! LMI modelling and a small embedded semidefinite programming solver.

pub mod expr;
pub mod ipm;
pub mod problem;

pub use expr::{AssembleError, Expr, Model, VarLayout, VarShape};
pub use ipm::{solve, InteriorPoint, SdpBackend, SdpSolution, SolveStatus, SolverOptions};
pub use problem::{Bound, Entry, LmiBlock, LmiProblem, ProblemError};
