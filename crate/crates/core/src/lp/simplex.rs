use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use super::{LinearProgram, LpSolution, LpStatus, Relation, FEAS_TOL};
use crate::error::{Error, Result};

const PRIMAL_TOL: f64 = 1e-9;
const HARRIS_TOL: f64 = 5e-10;
const PIVOT_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 64;
const RESIDUAL_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarStatus {
    Basic,
    AtLower,
    AtUpper,
    /// Nonbasic free variable resting at zero.
    Free,
}

/// Simplex basis over structural columns followed by one slack per row.
#[derive(Clone, Debug)]
pub struct Basis {
    pub status: Vec<VarStatus>,
    head: Vec<usize>,
    matrix_id: u64,
    inverse: Option<Arc<Vec<f64>>>,
}

impl Basis {
    pub fn head(&self) -> &[usize] {
        &self.head
    }

    /// Same basis without the cached inverse (cheaper to keep around).
    pub fn without_inverse(&self) -> Basis {
        Basis {
            inverse: None,
            ..self.clone()
        }
    }
}

/// Holds the constraint matrix of one model. Bounds are supplied per solve
/// so branch-and-bound nodes can share the setup.
pub struct LpSolver {
    m: usize,
    n: usize,
    a: Vec<f64>,
    /// Nonzeros by column and by row.
    cols: Vec<Vec<(usize, f64)>>,
    rows: Vec<Vec<(usize, f64)>>,
    b: Vec<f64>,
    cost: Vec<f64>,
    sign: f64,
    slack_lo: Vec<f64>,
    slack_hi: Vec<f64>,
    matrix_id: u64,
    max_iter: usize,
}

struct State {
    head: Vec<usize>,
    status: Vec<VarStatus>,
    binv: Vec<f64>,
    x: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl LpSolver {
    pub fn new(lp: &LinearProgram) -> Result<Self> {
        lp.validate()?;
        let m = lp.num_rows();
        let n = lp.num_vars();
        let mut a = vec![0.0; m * n];
        let mut b = Vec::with_capacity(m);
        let mut slack_lo = Vec::with_capacity(m);
        let mut slack_hi = Vec::with_capacity(m);
        for (i, row) in lp.constraints.iter().enumerate() {
            for &(j, v) in &row.terms {
                a[i * n + j] += v;
            }
            b.push(row.rhs);
            let (lo, hi) = match row.relation {
                Relation::Le => (0.0, f64::INFINITY),
                Relation::Ge => (f64::NEG_INFINITY, 0.0),
                Relation::Eq => (0.0, 0.0),
            };
            slack_lo.push(lo);
            slack_hi.push(hi);
        }
        let sign = lp.sense.sign();
        let cost = lp.objective.iter().map(|c| sign * c).collect();
        let mut h = DefaultHasher::new();
        (m, n).hash(&mut h);
        for v in &a {
            v.to_bits().hash(&mut h);
        }
        let mut cols = vec![Vec::new(); n];
        let mut rows = vec![Vec::new(); m];
        for i in 0..m {
            for j in 0..n {
                let v = a[i * n + j];
                if v != 0.0 {
                    cols[j].push((i, v));
                    rows[i].push((j, v));
                }
            }
        }
        Ok(LpSolver {
            m,
            n,
            a,
            cols,
            rows,
            b,
            cost,
            sign,
            slack_lo,
            slack_hi,
            matrix_id: h.finish(),
            max_iter: 50 * (m + n) + 1000,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.m
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    /// Solves the stored model with structural bounds `lower`/`upper`.
    pub fn solve(&self, lower: &[f64], upper: &[f64], hint: Option<&Basis>) -> Result<LpSolution> {
        let (m, n) = (self.m, self.n);
        if lower.len() != n || upper.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "bounds of length {}/{} for {n} variables",
                lower.len(),
                upper.len()
            )));
        }
        let mut lo = lower.to_vec();
        lo.extend_from_slice(&self.slack_lo);
        let mut hi = upper.to_vec();
        hi.extend_from_slice(&self.slack_hi);
        for j in 0..n {
            if lo[j] > hi[j] {
                return Ok(self.infeasible(0));
            }
        }

        let mut st = match hint.and_then(|h| self.state_from_hint(h, &lo, &hi)) {
            Some(st) => st,
            None => self.slack_state(lo, hi),
        };
        self.recompute_basics(&mut st);

        let cmax = self.cost.iter().fold(1.0_f64, |acc, c| acc.max(c.abs()));
        let mut iters = 0usize;
        let mut since_refactor = 0usize;
        let mut degenerate = 0usize;
        let mut bland = false;
        let mut confirmations = 0usize;
        let mut y = vec![0.0; m];
        let mut cb = vec![0.0; m];
        let mut d = vec![0.0; n + m];
        let mut alpha = vec![0.0; m];

        loop {
            if iters > self.max_iter {
                return Err(Error::NumericalFailure(format!(
                    "simplex exceeded {} iterations",
                    self.max_iter
                )));
            }

            let mut phase1 = false;
            for k in 0..m {
                let j = st.head[k];
                let v = st.x[j];
                cb[k] = if v < st.lo[j] - PRIMAL_TOL {
                    phase1 = true;
                    -1.0
                } else if v > st.hi[j] + PRIMAL_TOL {
                    phase1 = true;
                    1.0
                } else {
                    0.0
                };
            }
            if !phase1 {
                for k in 0..m {
                    let j = st.head[k];
                    cb[k] = if j < n { self.cost[j] } else { 0.0 };
                }
            }
            self.btran(&st, &cb, &mut y);
            let dtol = if phase1 { 1e-9 } else { 1e-9 * cmax };
            self.price(&st, &y, phase1, &mut d);

            let entering = self.choose_entering(&st, &d, dtol, bland);
            let Some((q, dir)) = entering else {
                // Confirm before declaring; refactor only if the inverse has drifted.
                if confirmations == 0 {
                    self.recompute_basics(&mut st);
                    if self.residual(&st, &cb, &y) > RESIDUAL_TOL {
                        self.refactor(&mut st)?;
                        self.recompute_basics(&mut st);
                        since_refactor = 0;
                    }
                    confirmations += 1;
                    continue;
                }
                if phase1 {
                    return Ok(self.infeasible(iters));
                }
                return Ok(self.finish(&st, iters));
            };

            self.ftran(&st, q, &mut alpha);
            let range = st.hi[q] - st.lo[q];
            let step = self.ratio_test(&st, &alpha, dir, phase1, bland);
            let (t, leave) = match step {
                Some((t, k, target)) if t < range => (t, Some((k, target))),
                _ if range.is_finite() => (range, None),
                _ => {
                    if phase1 {
                        return Err(Error::NumericalFailure("phase-one direction without breakpoint".into()));
                    }
                    return Ok(self.unbounded(&st, iters));
                }
            };

            if t <= 1e-12 {
                degenerate += 1;
                if degenerate > 2 * (m + n) {
                    bland = true;
                }
            } else {
                degenerate = 0;
                bland = false;
            }

            st.x[q] += dir * t;
            for k in 0..m {
                if alpha[k] != 0.0 {
                    let j = st.head[k];
                    st.x[j] -= dir * alpha[k] * t;
                }
            }
            match leave {
                None => {
                    st.status[q] = if dir > 0.0 {
                        VarStatus::AtUpper
                    } else {
                        VarStatus::AtLower
                    };
                    st.x[q] = if dir > 0.0 { st.hi[q] } else { st.lo[q] };
                }
                Some((r, target)) => {
                    let out = st.head[r];
                    st.x[out] = target;
                    st.status[out] = if target == st.lo[out] {
                        VarStatus::AtLower
                    } else {
                        VarStatus::AtUpper
                    };
                    st.head[r] = q;
                    st.status[q] = VarStatus::Basic;
                    self.pivot_inverse(&mut st.binv, &alpha, r);
                    since_refactor += 1;
                }
            }
            iters += 1;
            confirmations = 0;
            if since_refactor >= REFACTOR_EVERY {
                self.refactor(&mut st)?;
                self.recompute_basics(&mut st);
                since_refactor = 0;
            }
        }
    }

    fn slack_state(&self, lo: Vec<f64>, hi: Vec<f64>) -> State {
        let (m, n) = (self.m, self.n);
        let mut status = Vec::with_capacity(n + m);
        let mut x = vec![0.0; n + m];
        for j in 0..n {
            let s = nonbasic_status(VarStatus::AtLower, lo[j], hi[j]);
            x[j] = nonbasic_value(s, lo[j], hi[j]);
            status.push(s);
        }
        status.extend(std::iter::repeat_n(VarStatus::Basic, m));
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            binv[i * m + i] = 1.0;
        }
        State {
            head: (n..n + m).collect(),
            status,
            binv,
            x,
            lo,
            hi,
        }
    }

    fn state_from_hint(&self, hint: &Basis, lo: &[f64], hi: &[f64]) -> Option<State> {
        let (m, n) = (self.m, self.n);
        if hint.status.len() != n + m || hint.head.len() != m {
            return None;
        }
        let mut seen = vec![false; n + m];
        for &j in &hint.head {
            if j >= n + m || seen[j] || hint.status[j] != VarStatus::Basic {
                return None;
            }
            seen[j] = true;
        }
        let mut status = hint.status.clone();
        let mut x = vec![0.0; n + m];
        for j in 0..n + m {
            if status[j] != VarStatus::Basic {
                status[j] = nonbasic_status(status[j], lo[j], hi[j]);
                x[j] = nonbasic_value(status[j], lo[j], hi[j]);
            }
        }
        let mut st = State {
            head: hint.head.clone(),
            status,
            binv: Vec::new(),
            x,
            lo: lo.to_vec(),
            hi: hi.to_vec(),
        };
        match &hint.inverse {
            Some(inv) if hint.matrix_id == self.matrix_id && inv.len() == m * m => {
                st.binv = inv.as_ref().clone();
            }
            _ => {
                st.binv = vec![0.0; m * m];
                if self.refactor(&mut st).is_err() {
                    return None;
                }
            }
        }
        Some(st)
    }

    /// y^T = cb^T B^{-1}
    fn btran(&self, st: &State, cb: &[f64], y: &mut [f64]) {
        let m = self.m;
        y.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..m {
            let c = cb[k];
            if c != 0.0 {
                let row = &st.binv[k * m..(k + 1) * m];
                for (yi, bi) in y.iter_mut().zip(row) {
                    *yi += c * bi;
                }
            }
        }
    }

    fn price(&self, st: &State, y: &[f64], phase1: bool, d: &mut [f64]) {
        let (m, n) = (self.m, self.n);
        for j in 0..n {
            d[j] = if phase1 { 0.0 } else { self.cost[j] };
        }
        for i in 0..m {
            let yi = y[i];
            if yi != 0.0 {
                for &(j, aij) in &self.rows[i] {
                    d[j] -= yi * aij;
                }
            }
            d[n + i] = -yi;
        }
        for k in 0..m {
            d[st.head[k]] = 0.0;
        }
    }

    fn choose_entering(&self, st: &State, d: &[f64], dtol: f64, bland: bool) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        let mut best_score = 0.0;
        for (j, &dj) in d.iter().enumerate() {
            let dir = match st.status[j] {
                VarStatus::Basic => continue,
                _ if st.hi[j] <= st.lo[j] => continue,
                VarStatus::AtLower if dj < -dtol => 1.0,
                VarStatus::AtUpper if dj > dtol => -1.0,
                VarStatus::Free if dj < -dtol => 1.0,
                VarStatus::Free if dj > dtol => -1.0,
                _ => continue,
            };
            if bland {
                return Some((j, dir));
            }
            if dj.abs() > best_score {
                best_score = dj.abs();
                best = Some((j, dir));
            }
        }
        best
    }

    /// alpha = B^{-1} A_q
    fn ftran(&self, st: &State, q: usize, alpha: &mut [f64]) {
        let (m, n) = (self.m, self.n);
        if q >= n {
            let i = q - n;
            for k in 0..m {
                alpha[k] = st.binv[k * m + i];
            }
            return;
        }
        let col = &self.cols[q];
        for k in 0..m {
            let row = &st.binv[k * m..(k + 1) * m];
            alpha[k] = col.iter().map(|&(i, c)| row[i] * c).sum();
        }
    }

    /// Returns (step, leaving row, bound the leaving variable lands on).
    fn ratio_test(&self, st: &State, alpha: &[f64], dir: f64, phase1: bool, bland: bool) -> Option<(f64, usize, f64)> {
        let m = self.m;
        // (row, exact ratio, relaxed ratio, target)
        let mut cands: Vec<(usize, f64, f64, f64)> = Vec::new();
        for k in 0..m {
            let a = alpha[k];
            if a.abs() <= PIVOT_TOL {
                continue;
            }
            let j = st.head[k];
            let v = st.x[j];
            let rate = -dir * a;
            let target = if rate < 0.0 {
                if phase1 && v > st.hi[j] + PRIMAL_TOL {
                    st.hi[j]
                } else if v >= st.lo[j] - PRIMAL_TOL && st.lo[j].is_finite() {
                    st.lo[j]
                } else {
                    continue;
                }
            } else if phase1 && v < st.lo[j] - PRIMAL_TOL {
                st.lo[j]
            } else if v <= st.hi[j] + PRIMAL_TOL && st.hi[j].is_finite() {
                st.hi[j]
            } else {
                continue;
            };
            let gap = (target - v) / rate;
            let exact = gap.max(0.0);
            let relaxed = (gap + HARRIS_TOL / rate.abs()).max(0.0);
            cands.push((k, exact, relaxed, target));
        }
        if cands.is_empty() {
            return None;
        }
        if bland {
            let min = cands.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
            let pick = cands
                .iter()
                .filter(|c| c.1 <= min + 1e-12)
                .min_by_key(|c| st.head[c.0])
                .unwrap();
            return Some((pick.1, pick.0, pick.3));
        }
        let theta = cands.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
        let pick = cands
            .iter()
            .filter(|c| c.1 <= theta)
            .max_by(|x, y| {
                alpha[x.0]
                    .abs()
                    .partial_cmp(&alpha[y.0].abs())
                    .unwrap()
                    .then(st.head[y.0].cmp(&st.head[x.0]))
            })
            .unwrap();
        Some((pick.1, pick.0, pick.3))
    }

    fn pivot_inverse(&self, binv: &mut [f64], alpha: &[f64], r: usize) {
        let m = self.m;
        let piv = alpha[r];
        let mut prow: Vec<f64> = binv[r * m..(r + 1) * m].to_vec();
        prow.iter_mut().for_each(|v| *v /= piv);
        for k in 0..m {
            if k == r {
                continue;
            }
            let f = alpha[k];
            if f != 0.0 {
                let row = &mut binv[k * m..(k + 1) * m];
                for (v, p) in row.iter_mut().zip(&prow) {
                    *v -= f * p;
                }
            }
        }
        binv[r * m..(r + 1) * m].copy_from_slice(&prow);
    }

    /// Rebuilds B^{-1}. With basic slacks on rows S and structural columns J
    /// pivoting on the remaining rows T, B^{-1} has block rows D^{-1} (for J,
    /// on columns T) and e_i - A_{i,J} D^{-1} (for the slack of row i), where
    /// D = A_{T,J}.
    fn refactor(&self, st: &mut State) -> Result<()> {
        let (m, n) = (self.m, self.n);
        let mut slack_row = vec![false; m];
        let mut structural = Vec::new();
        for (k, &j) in st.head.iter().enumerate() {
            if j >= n {
                slack_row[j - n] = true;
            } else {
                structural.push(k);
            }
        }
        let rows_t: Vec<usize> = (0..m).filter(|&i| !slack_row[i]).collect();
        let t = rows_t.len();
        if t != structural.len() {
            return Err(Error::NumericalFailure("singular basis".into()));
        }
        let mut d = vec![0.0; t * t];
        for (a, &k) in structural.iter().enumerate() {
            let j = st.head[k];
            for (b, &i) in rows_t.iter().enumerate() {
                d[b * t + a] = self.a[i * n + j];
            }
        }
        let dinv = gauss_jordan_inverse(d, t)?;
        let mut inv = vec![0.0; m * m];
        for (a, &k) in structural.iter().enumerate() {
            for (b, &i) in rows_t.iter().enumerate() {
                inv[k * m + i] = dinv[a * t + b];
            }
        }
        let mut acc = vec![0.0; t];
        for (k, &j) in st.head.iter().enumerate() {
            if j < n {
                continue;
            }
            let i = j - n;
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (a, &kk) in structural.iter().enumerate() {
                let coef = self.a[i * n + st.head[kk]];
                if coef != 0.0 {
                    for (v, di) in acc.iter_mut().zip(&dinv[a * t..(a + 1) * t]) {
                        *v += coef * di;
                    }
                }
            }
            inv[k * m + i] = 1.0;
            for (b, &r) in rows_t.iter().enumerate() {
                inv[k * m + r] = -acc[b];
            }
        }
        st.binv = inv;
        Ok(())
    }

    /// Largest primal (`B x_B = rhs`) or dual (`B^T y = cb`) residual,
    /// relative to the data scale.
    fn residual(&self, st: &State, cb: &[f64], y: &[f64]) -> f64 {
        let (m, n) = (self.m, self.n);
        let mut rhs = self.b.clone();
        for j in 0..n + m {
            let v = st.x[j];
            if v == 0.0 {
                continue;
            }
            if j < n {
                for &(i, a) in &self.cols[j] {
                    rhs[i] -= a * v;
                }
            } else {
                rhs[j - n] -= v;
            }
        }
        let scale = 1.0 + self.b.iter().chain(st.x.iter()).fold(0.0_f64, |a, v| a.max(v.abs()));
        let primal = rhs.iter().fold(0.0_f64, |a, v| a.max(v.abs())) / scale;
        let yscale = 1.0 + cb.iter().chain(y.iter()).fold(0.0_f64, |a, v| a.max(v.abs()));
        let dual = st
            .head
            .iter()
            .zip(cb)
            .map(|(&j, c)| {
                let col = if j < n {
                    self.cols[j].iter().map(|&(i, a)| a * y[i]).sum()
                } else {
                    y[j - n]
                };
                (col - c).abs()
            })
            .fold(0.0_f64, f64::max)
            / yscale;
        primal.max(dual)
    }

    fn recompute_basics(&self, st: &mut State) {
        let (m, n) = (self.m, self.n);
        let mut rhs = self.b.clone();
        for j in 0..n {
            if st.status[j] != VarStatus::Basic && st.x[j] != 0.0 {
                let v = st.x[j];
                for &(i, a) in &self.cols[j] {
                    rhs[i] -= a * v;
                }
            }
        }
        for i in 0..m {
            let j = n + i;
            if st.status[j] != VarStatus::Basic {
                rhs[i] -= st.x[j];
            }
        }
        for k in 0..m {
            let row = &st.binv[k * m..(k + 1) * m];
            st.x[st.head[k]] = row.iter().zip(&rhs).map(|(b, r)| b * r).sum();
        }
    }

    fn infeasible(&self, iters: usize) -> LpSolution {
        LpSolution {
            status: LpStatus::Infeasible,
            x: vec![f64::NAN; self.n],
            objective: f64::NAN,
            duals: vec![0.0; self.m],
            reduced_costs: vec![0.0; self.n],
            iterations: iters,
            basis: None,
        }
    }

    fn unbounded(&self, st: &State, iters: usize) -> LpSolution {
        LpSolution {
            status: LpStatus::Unbounded,
            x: st.x[..self.n].to_vec(),
            objective: -self.sign * f64::INFINITY,
            duals: vec![0.0; self.m],
            reduced_costs: vec![0.0; self.n],
            iterations: iters,
            basis: None,
        }
    }

    fn finish(&self, st: &State, iters: usize) -> LpSolution {
        let (m, n) = (self.m, self.n);
        let mut cb = vec![0.0; m];
        for k in 0..m {
            let j = st.head[k];
            cb[k] = if j < n { self.cost[j] } else { 0.0 };
        }
        let mut y = vec![0.0; m];
        self.btran(st, &cb, &mut y);
        let mut d = vec![0.0; n + m];
        self.price(st, &y, false, &mut d);
        let x = st.x[..n].to_vec();
        let objective: f64 = x.iter().zip(&self.cost).map(|(v, c)| v * c).sum::<f64>() * self.sign;
        debug_assert!(st.x.iter().enumerate().all(|(j, &v)| {
            v >= st.lo[j] - FEAS_TOL * (1.0 + v.abs()) && v <= st.hi[j] + FEAS_TOL * (1.0 + v.abs())
        }));
        LpSolution {
            status: LpStatus::Optimal,
            x,
            objective,
            duals: y.iter().map(|v| self.sign * v).collect(),
            reduced_costs: d[..n].iter().map(|v| self.sign * v).collect(),
            iterations: iters,
            basis: Some(Basis {
                status: st.status.clone(),
                head: st.head.clone(),
                matrix_id: self.matrix_id,
                inverse: Some(Arc::new(st.binv.clone())),
            }),
        }
    }
}

fn nonbasic_status(preferred: VarStatus, lo: f64, hi: f64) -> VarStatus {
    match preferred {
        VarStatus::AtUpper if hi.is_finite() => VarStatus::AtUpper,
        _ if lo.is_finite() => VarStatus::AtLower,
        _ if hi.is_finite() => VarStatus::AtUpper,
        _ => VarStatus::Free,
    }
}

fn nonbasic_value(s: VarStatus, lo: f64, hi: f64) -> f64 {
    match s {
        VarStatus::AtLower => lo,
        VarStatus::AtUpper => hi,
        _ => 0.0,
    }
}

/// Inverse of a dense row-major `t x t` matrix by Gauss-Jordan elimination
/// with partial pivoting.
fn gauss_jordan_inverse(mut mat: Vec<f64>, t: usize) -> Result<Vec<f64>> {
    let mut inv = vec![0.0; t * t];
    for i in 0..t {
        inv[i * t + i] = 1.0;
    }
    for c in 0..t {
        let (p, pv) = (c..t)
            .map(|r| (r, mat[r * t + c].abs()))
            .fold((c, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if pv < 1e-12 {
            return Err(Error::NumericalFailure("singular basis".into()));
        }
        if p != c {
            for col in 0..t {
                mat.swap(p * t + col, c * t + col);
                inv.swap(p * t + col, c * t + col);
            }
        }
        let piv = mat[c * t + c];
        for col in 0..t {
            mat[c * t + col] /= piv;
            inv[c * t + col] /= piv;
        }
        for r in 0..t {
            if r == c {
                continue;
            }
            let f = mat[r * t + c];
            if f != 0.0 {
                for col in c..t {
                    mat[r * t + col] -= f * mat[c * t + col];
                }
                for col in 0..t {
                    inv[r * t + col] -= f * inv[c * t + col];
                }
            }
        }
    }
    Ok(inv)
}
