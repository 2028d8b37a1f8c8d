//! Dense linear programs and a bounded-variable revised simplex solver.
//!
//! Row duals follow the sensitivity convention: `duals[i]` is the rate of
//! change of the optimal objective (in the model's own sense) with respect to
//! the right-hand side of row `i`. For a minimization problem this makes the
//! dual vector a subgradient of the (convex) value function in `b`.

mod mps;
mod simplex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mps::write_mps;
pub use simplex::{Basis, LpSolver, VarStatus};

pub const FEAS_TOL: f64 = 1e-8;
pub const COMP_TOL: f64 = 1e-7;
pub const DUALITY_TOL: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Minimize,
    Maximize,
}

impl Sense {
    /// +1 for minimization, -1 for maximization.
    pub fn sign(self) -> f64 {
        match self {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = ">=")]
    Ge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub terms: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn activity(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(j, a)| a * x[j]).sum()
    }

    /// Amount by which `x` violates the row (0 when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let act = self.activity(x);
        match self.relation {
            Relation::Le => (act - self.rhs).max(0.0),
            Relation::Ge => (self.rhs - act).max(0.0),
            Relation::Eq => (act - self.rhs).abs(),
        }
    }
}

mod bound_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    // Infinite bounds are written as `null`.
    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Option<f64>> = v.iter().map(|x| if x.is_finite() { Some(*x) } else { None }).collect();
        serde::Serialize::serialize(&opt, s)
    }

    pub fn deserialize_lower<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect())
    }

    pub fn deserialize_upper<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

/// `sense  objective·x  s.t.  rows,  lower <= x <= upper`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProgram {
    pub sense: Sense,
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    #[serde(
        serialize_with = "bound_serde::serialize",
        deserialize_with = "bound_serde::deserialize_lower"
    )]
    pub lower: Vec<f64>,
    #[serde(
        serialize_with = "bound_serde::serialize",
        deserialize_with = "bound_serde::deserialize_upper"
    )]
    pub upper: Vec<f64>,
}

impl LinearProgram {
    pub fn new(sense: Sense) -> Self {
        LinearProgram {
            sense,
            objective: Vec::new(),
            constraints: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_rows(&self) -> usize {
        self.constraints.len()
    }

    pub fn add_var(&mut self, lower: f64, upper: f64, cost: f64) -> usize {
        self.objective.push(cost);
        self.lower.push(lower);
        self.upper.push(upper);
        self.objective.len() - 1
    }

    pub fn add_constraint(&mut self, terms: Vec<(usize, f64)>, relation: Relation, rhs: f64) -> usize {
        self.constraints.push(Constraint { terms, relation, rhs });
        self.constraints.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.objective.len();
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} objective coefficients but {} lower / {} upper bounds",
                n,
                self.lower.len(),
                self.upper.len()
            )));
        }
        for (j, (&l, &u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return Err(Error::InvalidModel(format!("variable {j} has bounds [{l}, {u}]")));
            }
            if !self.objective[j].is_finite() {
                return Err(Error::InvalidModel(format!("objective coefficient {j} not finite")));
            }
        }
        for (i, row) in self.constraints.iter().enumerate() {
            if !row.rhs.is_finite() {
                return Err(Error::InvalidModel(format!("row {i} has non-finite rhs")));
            }
            for &(j, a) in &row.terms {
                if j >= n {
                    return Err(Error::DimensionMismatch(format!(
                        "row {i} references variable {j} but only {n} are declared"
                    )));
                }
                if !a.is_finite() {
                    return Err(Error::InvalidModel(format!("row {i} has non-finite coefficient")));
                }
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest bound or row violation of `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (j, &v) in x.iter().enumerate() {
            worst = worst.max(self.lower[j] - v).max(v - self.upper[j]);
        }
        for row in &self.constraints {
            worst = worst.max(row.violation(x));
        }
        worst
    }

    /// Drops rows without coefficients. Fails if one of them is violated.
    pub fn remove_empty_rows(&mut self) -> Result<usize> {
        let before = self.constraints.len();
        let mut bad = None;
        self.constraints.retain(|row| {
            if row.terms.iter().any(|&(_, a)| a != 0.0) {
                return true;
            }
            let zero_row = Constraint {
                terms: Vec::new(),
                ..row.clone()
            };
            if zero_row.violation(&[]) > FEAS_TOL {
                bad = Some(row.rhs);
            }
            false
        });
        if let Some(rhs) = bad {
            return Err(Error::InvalidModel(format!("empty row with unsatisfiable rhs {rhs}")));
        }
        Ok(before - self.constraints.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Per-row sensitivities d(objective)/d(rhs).
    pub duals: Vec<f64>,
    /// Per-variable reduced costs in the model's sense.
    pub reduced_costs: Vec<f64>,
    pub iterations: usize,
    #[serde(skip)]
    pub basis: Option<Basis>,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

pub fn solve_lp(lp: &LinearProgram, basis_hint: Option<&Basis>) -> Result<LpSolution> {
    LpSolver::new(lp)?.solve(&lp.lower, &lp.upper, basis_hint)
}

/// Objective of the dual problem reconstructed from row duals and reduced
/// costs; each nonzero reduced cost is charged to the bound its sign selects.
pub fn dual_objective(sol: &LpSolution, lp: &LinearProgram) -> f64 {
    let s = lp.sense.sign();
    let mut obj: f64 = lp.constraints.iter().zip(&sol.duals).map(|(r, y)| r.rhs * y).sum();
    for j in 0..lp.num_vars() {
        // internal (minimization) reduced cost
        let d = s * sol.reduced_costs[j];
        if d.abs() <= 1e-12 {
            continue;
        }
        let bound = if d > 0.0 { lp.lower[j] } else { lp.upper[j] };
        obj += sol.reduced_costs[j] * bound;
    }
    obj
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_active_constraint() {
        let mut lp = LinearProgram::new(Sense::Minimize);
        let x = lp.add_var(0.0, 10.0, 1.0);
        lp.add_constraint(vec![(x, 1.0)], Relation::Ge, 2.0);
        let sol = solve_lp(&lp, None).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!((sol.x[0] - 2.0).abs() < 1e-12);
        assert!((sol.objective - 2.0).abs() < 1e-12);
        assert!((sol.duals[0] - 1.0).abs() < 1e-12);
        assert!((dual_objective(&sol, &lp) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn unbounded_ray() {
        let mut lp = LinearProgram::new(Sense::Minimize);
        let x = lp.add_var(0.0, f64::INFINITY, -1.0);
        let y = lp.add_var(0.0, 1.0, 0.0);
        lp.add_constraint(vec![(x, 1.0), (y, -1.0)], Relation::Ge, 0.0);
        let sol = solve_lp(&lp, None).unwrap();
        assert_eq!(sol.status, LpStatus::Unbounded);

        let mut lp = LinearProgram::new(Sense::Minimize);
        lp.add_var(0.0, f64::INFINITY, -1.0);
        assert_eq!(solve_lp(&lp, None).unwrap().status, LpStatus::Unbounded);
    }

    #[test]
    fn inactive_rows_use_bound_multipliers() {
        let mut lp = LinearProgram::new(Sense::Minimize);
        let x = lp.add_var(1.0, 4.0, 3.0);
        let y = lp.add_var(-2.0, 5.0, -1.0);
        lp.add_constraint(vec![(x, 1.0), (y, 1.0)], Relation::Le, 100.0);
        let sol = solve_lp(&lp, None).unwrap();
        assert!(sol.is_optimal());
        assert_eq!(sol.duals[0], 0.0);
        assert!((sol.objective - (3.0 - 5.0)).abs() < 1e-12);
        assert!((dual_objective(&sol, &lp) - sol.objective).abs() < 1e-12);
    }

    #[test]
    fn maximization_duals_are_sensitivities() {
        // max x + y s.t. x + 2y <= 4, 3x + y <= 6, x,y >= 0 -> x=1.6, y=1.2
        let mut lp = LinearProgram::new(Sense::Maximize);
        let x = lp.add_var(0.0, f64::INFINITY, 1.0);
        let y = lp.add_var(0.0, f64::INFINITY, 1.0);
        lp.add_constraint(vec![(x, 1.0), (y, 2.0)], Relation::Le, 4.0);
        lp.add_constraint(vec![(x, 3.0), (y, 1.0)], Relation::Le, 6.0);
        let sol = solve_lp(&lp, None).unwrap();
        assert!((sol.objective - 2.8).abs() < 1e-10);
        assert!((sol.duals[0] - 0.4).abs() < 1e-10);
        assert!((sol.duals[1] - 0.2).abs() < 1e-10);
        assert!((dual_objective(&sol, &lp) - 2.8).abs() < 1e-10);
    }

    #[test]
    fn infeasible_detected() {
        let mut lp = LinearProgram::new(Sense::Minimize);
        let x = lp.add_var(0.0, 1.0, 1.0);
        lp.add_constraint(vec![(x, 1.0)], Relation::Ge, 2.0);
        assert_eq!(solve_lp(&lp, None).unwrap().status, LpStatus::Infeasible);
    }

    #[test]
    fn free_variables_and_equalities() {
        // min |x - 3| style: min t s.t. t >= x - 3, t >= 3 - x, x free, x = 1
        let mut lp = LinearProgram::new(Sense::Minimize);
        let x = lp.add_var(f64::NEG_INFINITY, f64::INFINITY, 0.0);
        let t = lp.add_var(f64::NEG_INFINITY, f64::INFINITY, 1.0);
        lp.add_constraint(vec![(t, 1.0), (x, -1.0)], Relation::Ge, -3.0);
        lp.add_constraint(vec![(t, 1.0), (x, 1.0)], Relation::Ge, 3.0);
        lp.add_constraint(vec![(x, 1.0)], Relation::Eq, 1.0);
        let sol = solve_lp(&lp, None).unwrap();
        assert!(sol.is_optimal());
        assert!((sol.objective - 2.0).abs() < 1e-10);
        assert!((sol.x[x] - 1.0).abs() < 1e-10);
        assert!((sol.duals[2] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn malformed_rows_rejected() {
        let mut lp = LinearProgram::new(Sense::Minimize);
        lp.add_var(0.0, 1.0, 1.0);
        lp.add_constraint(vec![(3, 1.0)], Relation::Le, 1.0);
        assert!(matches!(solve_lp(&lp, None), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn empty_rows_removed() {
        let mut lp = LinearProgram::new(Sense::Minimize);
        lp.add_var(0.0, 1.0, 1.0);
        lp.add_constraint(vec![], Relation::Le, 1.0);
        lp.add_constraint(vec![(0, 0.0)], Relation::Eq, 0.0);
        assert_eq!(lp.remove_empty_rows().unwrap(), 2);
        lp.add_constraint(vec![], Relation::Ge, 1.0);
        assert!(lp.remove_empty_rows().is_err());
    }

    #[test]
    fn json_round_trip_keeps_infinite_bounds() {
        let mut lp = LinearProgram::new(Sense::Maximize);
        lp.add_var(f64::NEG_INFINITY, 2.5, 1.0);
        lp.add_var(0.1, f64::INFINITY, -0.3);
        lp.add_constraint(vec![(0, 1.0), (1, 1.0 / 3.0)], Relation::Le, 7.0);
        let text = serde_json::to_string(&lp).unwrap();
        let back: LinearProgram = serde_json::from_str(&text).unwrap();
        assert_eq!(lp, back);
    }
}
