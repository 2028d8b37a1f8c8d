//! Branch-and-bound over binary variables with simplex relaxations.
//!
//! Nodes are explored best-bound first. While no incumbent exists, and for a
//! short stretch after every new incumbent, the search plunges depth-first
//! into the child on the rounding side of the branching variable.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;
use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::{Basis, LinearProgram, LpSolution, LpSolver, LpStatus, FEAS_TOL};

pub const INT_TOL: f64 = 1e-6;
const PLUNGE_AFTER_INCUMBENT: usize = 16;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MilpProblem {
    pub lp: LinearProgram,
    pub binaries: Vec<usize>,
    #[serde(default)]
    pub warm_start: Option<Vec<f64>>,
}

impl MilpProblem {
    pub fn new(lp: LinearProgram, binaries: Vec<usize>) -> Self {
        MilpProblem {
            lp,
            binaries,
            warm_start: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lp.validate()?;
        for &j in &self.binaries {
            if j >= self.lp.num_vars() {
                return Err(Error::DimensionMismatch(format!("binary index {j} out of range")));
            }
            if self.lp.lower[j] < 0.0 || self.lp.upper[j] > 1.0 {
                return Err(Error::InvalidModel(format!(
                    "binary {j} has bounds [{}, {}]",
                    self.lp.lower[j], self.lp.upper[j]
                )));
            }
        }
        Ok(())
    }

    /// Largest row/bound violation, or integrality violation on binaries.
    pub fn infeasibility(&self, x: &[f64]) -> f64 {
        if x.len() != self.lp.num_vars() {
            return f64::INFINITY;
        }
        let frac = self
            .binaries
            .iter()
            .map(|&j| (x[j] - x[j].round()).abs())
            .fold(0.0, f64::max);
        self.lp.max_violation(x).max(frac)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Limits {
    pub time_s: f64,
    /// Relative gap `(bound - incumbent) / max(1, |incumbent|)` at which a
    /// solve is declared optimal.
    pub gap_rel: f64,
    pub node_cap: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            time_s: 600.0,
            gap_rel: 1e-6,
            node_cap: 1_000_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MilpStatus {
    Optimal,
    TimeLimit,
    NodeLimit,
    Infeasible,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LogEntry {
    pub time_s: f64,
    pub incumbent: Option<f64>,
    pub bound: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveLog {
    pub entries: Vec<LogEntry>,
    pub nodes: usize,
    pub lp_iterations: usize,
    pub status: MilpStatus,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MilpResult {
    pub status: MilpStatus,
    pub x: Option<Vec<f64>>,
    pub objective: Option<f64>,
    pub best_bound: f64,
    pub log: SolveLog,
}

impl MilpResult {
    /// `(bound - incumbent) / max(1, |incumbent|)` in the model's sense.
    pub fn relative_gap(&self, sense_sign: f64) -> f64 {
        match self.objective {
            Some(obj) => sense_sign * (obj - self.best_bound) / obj.abs().max(1.0),
            None => f64::INFINITY,
        }
    }
}

/// Incumbent notification: wall time, objective, full assignment.
pub type IncumbentCallback<'a> = dyn FnMut(f64, f64, &[f64]) + 'a;

/// Most fractional candidate (`|v - 0.5|` smallest), ties to the lowest index.
pub fn branch_select(fractional: &[(usize, f64)]) -> usize {
    let mut best = fractional[0];
    for &(j, v) in &fractional[1..] {
        let (dj, db) = ((v - 0.5).abs(), (best.1 - 0.5).abs());
        if dj < db || (dj == db && j < best.0) {
            best = (j, v);
        }
    }
    best.0
}

struct Node {
    id: usize,
    bound: f64,
    depth: usize,
    fixings: Vec<(usize, f64)>,
    basis: Option<Arc<Basis>>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // BinaryHeap is a max-heap: smallest bound (internal minimization) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.bound.total_cmp(&self.bound).then_with(|| other.id.cmp(&self.id))
    }
}

pub fn solve_milp(p: &MilpProblem, limits: Limits, seed: u64) -> Result<MilpResult> {
    solve_milp_with_callback(p, limits, seed, &mut |_, _, _| {})
}

/// `seed` is accepted for interface stability; the engine is deterministic.
pub fn solve_milp_with_callback(
    p: &MilpProblem,
    limits: Limits,
    _seed: u64,
    on_incumbent: &mut IncumbentCallback<'_>,
) -> Result<MilpResult> {
    p.validate()?;
    let start = Instant::now();
    let lp = &p.lp;
    let sign = lp.sense.sign();
    let solver = LpSolver::new(lp)?;
    let mut log = SolveLog {
        entries: Vec::new(),
        nodes: 0,
        lp_iterations: 0,
        status: MilpStatus::Infeasible,
        warnings: Vec::new(),
    };

    // internal minimization of sign * objective
    let mut incumbent: Option<(f64, Vec<f64>)> = None;
    if let Some(ws) = &p.warm_start {
        let viol = p.infeasibility(ws);
        if viol <= FEAS_TOL.max(INT_TOL) {
            let obj = lp.objective_value(ws);
            incumbent = Some((sign * obj, ws.clone()));
            on_incumbent(start.elapsed().as_secs_f64(), obj, ws);
        } else {
            let msg = format!("InfeasibleWarmStart: violation {viol:.3e}, warm start discarded");
            warn!("{msg}");
            log.warnings.push(msg);
        }
    }

    let tol = |inc: f64| limits.gap_rel * inc.abs().max(1.0);
    let mut heap = BinaryHeap::new();
    let mut next_id = 1;
    let mut dive: Option<Node> = Some(Node {
        id: 0,
        bound: f64::NEG_INFINITY,
        depth: 0,
        fixings: Vec::new(),
        basis: None,
    });
    let mut plunge = if incumbent.is_none() { usize::MAX } else { 0 };
    let mut best_bound = f64::NEG_INFINITY;
    let mut lower = lp.lower.clone();
    let mut upper = lp.upper.clone();
    let mut stopped: Option<MilpStatus> = None;

    let record = |log: &mut SolveLog, t: f64, inc: &Option<(f64, Vec<f64>)>, bound: f64| {
        let entry = LogEntry {
            time_s: t,
            incumbent: inc.as_ref().map(|(v, _)| sign * v),
            bound: sign * bound,
        };
        if let Some(last) = log.entries.last() {
            if last.incumbent == entry.incumbent && last.bound == entry.bound {
                return;
            }
        }
        log.entries.push(entry);
    };
    if incumbent.is_some() {
        record(&mut log, start.elapsed().as_secs_f64(), &incumbent, f64::NEG_INFINITY);
    }

    loop {
        let node = match dive.take() {
            Some(n) => n,
            None => match heap.pop() {
                Some(n) => n,
                None => break,
            },
        };
        if let Some((inc, _)) = &incumbent {
            if node.bound >= inc - tol(*inc) {
                continue;
            }
        }
        if start.elapsed().as_secs_f64() > limits.time_s {
            heap.push(node);
            stopped = Some(MilpStatus::TimeLimit);
            break;
        }
        if log.nodes >= limits.node_cap {
            heap.push(node);
            stopped = Some(MilpStatus::NodeLimit);
            break;
        }
        log.nodes += 1;

        lower.copy_from_slice(&lp.lower);
        upper.copy_from_slice(&lp.upper);
        for &(j, v) in &node.fixings {
            lower[j] = v;
            upper[j] = v;
        }
        let sol = solve_node(&solver, &lower, &upper, node.basis.as_deref())?;
        log.lp_iterations += sol.iterations;
        match sol.status {
            LpStatus::Infeasible => {}
            LpStatus::Unbounded => {
                return Err(Error::InvalidModel("LP relaxation is unbounded".into()));
            }
            LpStatus::Optimal => {
                let value = sign * sol.objective;
                let prunable = incumbent.as_ref().is_some_and(|(inc, _)| value >= inc - tol(*inc));
                if !prunable {
                    let fractional: Vec<(usize, f64)> = p
                        .binaries
                        .iter()
                        .filter(|&&j| (sol.x[j] - sol.x[j].round()).abs() > INT_TOL)
                        .map(|&j| (j, sol.x[j]))
                        .collect();
                    if fractional.is_empty() {
                        if let Some((v, x)) = polish(&solver, p, &sol, &lower, &upper)? {
                            let better = incumbent.as_ref().is_none_or(|(inc, _)| sign * v < *inc);
                            if better {
                                incumbent = Some((sign * v, x));
                                let (_, xi) = incumbent.as_ref().unwrap();
                                on_incumbent(start.elapsed().as_secs_f64(), v, xi);
                                plunge = PLUNGE_AFTER_INCUMBENT;
                            }
                        }
                    } else {
                        let j = branch_select(&fractional);
                        let xj = sol.x[j];
                        let basis = sol.basis.map(Arc::new);
                        let stored = basis.as_ref().map(|b| Arc::new(b.without_inverse()));
                        let mut children = [(0.0, stored.clone()), (1.0, stored)];
                        if xj >= 0.5 {
                            children.swap(0, 1);
                        }
                        // first child is on the rounding side
                        for (k, (val, b)) in children.into_iter().enumerate() {
                            let mut fixings = node.fixings.clone();
                            fixings.push((j, val));
                            let child = Node {
                                id: next_id,
                                bound: value,
                                depth: node.depth + 1,
                                fixings,
                                basis: b,
                            };
                            next_id += 1;
                            if k == 0 && plunge > 0 {
                                plunge = plunge.saturating_sub(1);
                                dive = Some(Node {
                                    basis: basis.clone(),
                                    ..child
                                });
                            } else {
                                heap.push(child);
                            }
                        }
                    }
                }
            }
        }

        let open_min = heap
            .peek()
            .map(|n| n.bound)
            .into_iter()
            .chain(dive.as_ref().map(|n| n.bound))
            .fold(f64::INFINITY, f64::min);
        let bound = match &incumbent {
            Some((inc, _)) => open_min.min(*inc),
            None => open_min,
        };
        best_bound = best_bound.max(bound);
        record(&mut log, start.elapsed().as_secs_f64(), &incumbent, best_bound);
        if let Some((inc, _)) = &incumbent {
            if inc - best_bound <= tol(*inc) {
                break;
            }
        }
    }

    let status = match (&stopped, &incumbent) {
        (Some(s), _) => *s,
        (None, Some(_)) => MilpStatus::Optimal,
        (None, None) => MilpStatus::Infeasible,
    };
    if stopped.is_some() {
        let open_min = heap.iter().map(|n| n.bound).fold(f64::INFINITY, f64::min);
        let b = match &incumbent {
            Some((inc, _)) => open_min.min(*inc),
            None => open_min,
        };
        best_bound = best_bound.max(b);
    }
    log.status = status;
    record(&mut log, start.elapsed().as_secs_f64(), &incumbent, best_bound);
    let (objective, x) = match incumbent {
        Some((v, x)) => (Some(sign * v), Some(x)),
        None => (None, None),
    };
    Ok(MilpResult {
        status,
        x,
        objective,
        best_bound: sign * best_bound,
        log,
    })
}

fn solve_node(solver: &LpSolver, lo: &[f64], hi: &[f64], hint: Option<&Basis>) -> Result<LpSolution> {
    match solver.solve(lo, hi, hint) {
        Err(Error::NumericalFailure(_)) if hint.is_some() => solver.solve(lo, hi, None),
        r => r,
    }
}

/// Re-solves with binaries fixed at their rounded values so the returned
/// assignment satisfies the big-M rows exactly rather than up to `INT_TOL`.
fn polish(
    solver: &LpSolver,
    p: &MilpProblem,
    sol: &LpSolution,
    lower: &[f64],
    upper: &[f64],
) -> Result<Option<(f64, Vec<f64>)>> {
    let mut lo = lower.to_vec();
    let mut hi = upper.to_vec();
    let mut exact = true;
    for &j in &p.binaries {
        let r = sol.x[j].round();
        if r != sol.x[j] {
            exact = false;
        }
        lo[j] = r;
        hi[j] = r;
    }
    if exact {
        return Ok(Some((sol.objective, sol.x.clone())));
    }
    let fixed = solve_node(solver, &lo, &hi, sol.basis.as_ref())?;
    if fixed.status != LpStatus::Optimal {
        return Ok(None);
    }
    Ok(Some((fixed.objective, fixed.x)))
}
