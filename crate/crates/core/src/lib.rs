//! Robust differential dynamic programming: LMI backward passes with S-procedure
//! multipliers for plants in generalized-plant (LFT) form.

pub mod backward;
pub mod driver;
pub mod models;
pub mod plant;
pub mod qapprox;
pub mod quadform;
