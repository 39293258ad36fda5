//! Dense linear programs: model, two-phase bounded simplex, certificate checks.

mod simplex;
mod verify;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub(crate) use simplex::solve_lp_truncated;
pub use simplex::{solve_lp, solve_lp_warm, WarmStart};
pub use verify::{verify_solution, RejectReason, Verdict, Verifier};

/// Feasibility tolerance promised by `solve_lp` on row residuals and bounds.
pub const FEAS_TOL: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    #[serde(rename = "max")]
    Maximize,
    #[serde(rename = "min")]
    Minimize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("invalid lp: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("iteration limit of {0} pivots reached")]
    IterationLimit(usize),
}

/// `opt cᵀx` subject to `A x = b`, `G x ≤ h` and per-variable bounds.
///
/// A variable with `nonneg[j]` has an implicit lower bound of zero. `bounds[j]`
/// narrows it further; infinite endpoints are allowed. A variable with neither
/// is free.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpProblem {
    pub sense: Sense,
    pub objective: Vec<f64>,
    pub eq_matrix: Vec<Vec<f64>>,
    pub eq_rhs: Vec<f64>,
    pub ineq_matrix: Vec<Vec<f64>>,
    pub ineq_rhs: Vec<f64>,
    pub nonneg: Vec<bool>,
    pub bounds: Vec<Option<(f64, f64)>>,
}

impl LpProblem {
    /// A problem with no rows whose variables are all nonnegative.
    pub fn new(sense: Sense, objective: Vec<f64>) -> Self {
        let n = objective.len();
        LpProblem {
            sense,
            objective,
            eq_matrix: Vec::new(),
            eq_rhs: Vec::new(),
            ineq_matrix: Vec::new(),
            ineq_rhs: Vec::new(),
            nonneg: vec![true; n],
            bounds: vec![None; n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_rows(&self) -> usize {
        self.eq_matrix.len() + self.ineq_matrix.len()
    }

    pub fn add_eq(&mut self, row: Vec<f64>, rhs: f64) {
        self.eq_matrix.push(row);
        self.eq_rhs.push(rhs);
    }

    pub fn add_ineq(&mut self, row: Vec<f64>, rhs: f64) {
        self.ineq_matrix.push(row);
        self.ineq_rhs.push(rhs);
    }

    pub fn lower(&self, j: usize) -> f64 {
        let base = if self.nonneg[j] { 0.0 } else { f64::NEG_INFINITY };
        match self.bounds[j] {
            Some((lo, _)) => lo.max(base),
            None => base,
        }
    }

    pub fn upper(&self, j: usize) -> f64 {
        match self.bounds[j] {
            Some((_, hi)) => hi,
            None => f64::INFINITY,
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        dot(&self.objective, x)
    }

    pub fn validate(&self) -> Result<(), LpError> {
        let n = self.num_vars();
        let bad = |msg: String| Err(LpError::InvalidInput(msg));
        if self.nonneg.len() != n || self.bounds.len() != n {
            return bad(format!(
                "nonneg/bounds length {}/{} != {} variables",
                self.nonneg.len(),
                self.bounds.len(),
                n
            ));
        }
        if self.eq_matrix.len() != self.eq_rhs.len() {
            return bad("equality rows and rhs differ in length".into());
        }
        if self.ineq_matrix.len() != self.ineq_rhs.len() {
            return bad("inequality rows and rhs differ in length".into());
        }
        if self.objective.iter().any(|v| !v.is_finite()) {
            return bad("non-finite objective coefficient".into());
        }
        for (i, row) in self.eq_matrix.iter().chain(&self.ineq_matrix).enumerate() {
            if row.len() != n {
                return bad(format!("row {i} has {} entries, expected {n}", row.len()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return bad(format!("row {i} has a non-finite entry"));
            }
        }
        if self.eq_rhs.iter().chain(&self.ineq_rhs).any(|v| !v.is_finite()) {
            return bad("non-finite right-hand side".into());
        }
        for j in 0..n {
            let (lo, hi) = (self.lower(j), self.upper(j));
            if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
                return bad(format!("variable {j} has empty bounds [{lo}, {hi}]"));
            }
        }
        Ok(())
    }

    /// Largest row or bound violation of `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (row, b) in self.eq_matrix.iter().zip(&self.eq_rhs) {
            worst = worst.max((dot(row, x) - b).abs());
        }
        for (row, h) in self.ineq_matrix.iter().zip(&self.ineq_rhs) {
            worst = worst.max(dot(row, x) - h);
        }
        for (j, &v) in x.iter().enumerate() {
            worst = worst.max(self.lower(j) - v).max(v - self.upper(j));
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    #[serde(rename = "optimal")]
    Optimal,
    #[serde(rename = "infeasible")]
    Infeasible,
    #[serde(rename = "unbounded")]
    Unbounded,
}

/// Result of `solve_lp`.
///
/// `dual` has one entry per equality row followed by one per inequality row.
/// Sign convention: `cᵀx = bᵀy + hᵀz + (bound terms)` with reduced costs
/// `d = c − Aᵀy − Gᵀz`, so `z ≥ 0` for maximization and `z ≤ 0` for
/// minimization. For an infeasible status `dual` holds a Farkas ray instead.
/// `basis` lists the basic columns of the augmented vector `[x | slacks]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: LpStatus,
    pub primal: Vec<f64>,
    pub dual: Vec<f64>,
    pub objective: f64,
    pub basis: Vec<usize>,
    pub iterations: usize,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_combine_nonneg_and_box() {
        let mut lp = LpProblem::new(Sense::Maximize, vec![1.0, 1.0, 1.0]);
        lp.nonneg[1] = false;
        lp.bounds[2] = Some((-3.0, 4.0));
        assert_eq!(lp.lower(0), 0.0);
        assert_eq!(lp.lower(1), f64::NEG_INFINITY);
        assert_eq!(lp.lower(2), 0.0);
        assert_eq!(lp.upper(2), 4.0);
        assert!(lp.validate().is_ok());
    }

    #[test]
    fn ragged_rows_rejected() {
        let mut lp = LpProblem::new(Sense::Minimize, vec![1.0, 2.0]);
        lp.add_eq(vec![1.0], 1.0);
        assert!(matches!(lp.validate(), Err(LpError::InvalidInput(_))));
    }
}
