//! DC optimal power flow: the parametric LP, the proxy's repair layers, and
//! the two verification MILPs (compact and KKT bilevel).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encodings::{encode_clamp, encode_max_of, encode_network, EncodingContext, InputMap, LinExpr, Op};
use crate::error::{Error, Result};
use crate::lp::{solve_lp, LinearProgram, LpSolution, LpStatus, Relation, Sense};
use crate::milp::MilpProblem;
use crate::neural::{LayerBounds, MlpNetwork};

pub const EPS_PROJ: f64 = 1e-9;
pub const MAX_BISECTION: usize = 200;
/// Width of the per-bus latent noise box.
pub const BETA_WIDTH: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcopfCase {
    #[serde(rename = "B")]
    pub buses: usize,
    #[serde(rename = "E")]
    pub lines: usize,
    pub c: Vec<f64>,
    /// PTDF, row-major `lines x buses`.
    #[serde(rename = "H")]
    pub h: Vec<f64>,
    pub f_bar: Vec<f64>,
    pub p_lo: Vec<f64>,
    pub p_hi: Vec<f64>,
    pub d_ref: Vec<f64>,
    #[serde(rename = "M_th")]
    pub m_th: f64,
}

impl DcopfCase {
    pub fn h(&self, e: usize, i: usize) -> f64 {
        self.h[e * self.buses + i]
    }

    /// `H v`
    pub fn flows(&self, v: &[f64]) -> Vec<f64> {
        (0..self.lines)
            .map(|e| (0..self.buses).map(|i| self.h(e, i) * v[i]).sum())
            .collect()
    }

    /// `H^T w`
    pub fn flows_transpose(&self, w: &[f64]) -> Vec<f64> {
        (0..self.buses)
            .map(|i| (0..self.lines).map(|e| self.h(e, i) * w[e]).sum())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (b, e) = (self.buses, self.lines);
        let sizes = [
            ("c", self.c.len(), b),
            ("H", self.h.len(), e * b),
            ("f_bar", self.f_bar.len(), e),
            ("p_lo", self.p_lo.len(), b),
            ("p_hi", self.p_hi.len(), b),
            ("d_ref", self.d_ref.len(), b),
        ];
        for (name, got, want) in sizes {
            if got != want {
                return Err(Error::Schema(format!("{name} has {got} entries, expected {want}")));
            }
        }
        let all = self
            .c
            .iter()
            .chain(&self.h)
            .chain(&self.f_bar)
            .chain(&self.p_lo)
            .chain(&self.p_hi)
            .chain(&self.d_ref);
        if all.into_iter().any(|v| !v.is_finite()) || !self.m_th.is_finite() {
            return Err(Error::Schema("case data must be finite".into()));
        }
        if self.p_lo.iter().zip(&self.p_hi).any(|(l, h)| l > h) {
            return Err(Error::Schema("p_lo exceeds p_hi".into()));
        }
        if self.f_bar.iter().any(|&f| f <= 0.0) {
            return Err(Error::Schema("flow limits must be positive".into()));
        }
        let cmax = self.c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if self.m_th <= cmax {
            return Err(Error::Schema(format!(
                "M_th = {} must exceed max cost {cmax}",
                self.m_th
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let case: DcopfCase = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        case.validate()?;
        Ok(case)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One bus, one generator, no lines.
    pub fn one_bus() -> Self {
        DcopfCase {
            buses: 1,
            lines: 0,
            c: vec![2.0],
            h: vec![],
            f_bar: vec![],
            p_lo: vec![0.0],
            p_hi: vec![10.0],
            d_ref: vec![5.0],
            m_th: 10.0,
        }
    }

    /// Two buses joined by one line; the cheap generator sits at bus 0.
    pub fn two_bus() -> Self {
        DcopfCase {
            buses: 2,
            lines: 1,
            c: vec![10.0, 30.0],
            h: ptdf_from_lines(2, &[(0, 1, 1.0)]).unwrap(),
            f_bar: vec![0.5],
            p_lo: vec![0.0, 0.0],
            p_hi: vec![1.5, 1.5],
            d_ref: vec![0.3, 1.0],
            m_th: 100.0,
        }
    }

    /// Triangle with equal susceptances.
    pub fn three_bus() -> Self {
        DcopfCase {
            buses: 3,
            lines: 3,
            c: vec![10.0, 20.0, 30.0],
            h: ptdf_from_lines(3, &[(0, 1, 1.0), (0, 2, 1.0), (1, 2, 1.0)]).unwrap(),
            f_bar: vec![0.6, 0.6, 0.3],
            p_lo: vec![0.0; 3],
            p_hi: vec![1.2, 1.0, 1.0],
            d_ref: vec![0.6, 0.9, 0.5],
            m_th: 100.0,
        }
    }

    pub fn desk(name: &str) -> Option<Self> {
        match name {
            "1bus" => Some(Self::one_bus()),
            "2bus" => Some(Self::two_bus()),
            "3bus" => Some(Self::three_bus()),
            _ => None,
        }
    }

    /// Random connected case with 2 or 3 buses (`buses` picks which). Total
    /// capacity leaves room for a 30% load increase.
    pub fn random(buses: usize, seed: u64) -> Result<Self> {
        if !(2..=3).contains(&buses) {
            return Err(Error::Unsupported(format!(
                "random cases have 2 or 3 buses, not {buses}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lines: Vec<(usize, usize, f64)> = if buses == 2 {
            vec![(0, 1, rng.gen_range(0.5..2.0))]
        } else {
            vec![
                (0, 1, rng.gen_range(0.5..2.0)),
                (0, 2, rng.gen_range(0.5..2.0)),
                (1, 2, rng.gen_range(0.5..2.0)),
            ]
        };
        let d_ref: Vec<f64> = (0..buses).map(|_| rng.gen_range(0.3..1.0)).collect();
        let total: f64 = d_ref.iter().sum();
        let p_hi: Vec<f64> = (0..buses).map(|_| rng.gen_range(0.6..1.0) * total).collect();
        let mut c: Vec<f64> = (0..buses).map(|_| rng.gen_range(5.0..40.0)).collect();
        c.iter_mut().for_each(|v| *v = (*v * 10.0).round() / 10.0);
        let f_bar = (0..lines.len())
            .map(|_| rng.gen_range(0.2..0.8) * total / buses as f64)
            .collect();
        let case = DcopfCase {
            buses,
            lines: lines.len(),
            c,
            h: ptdf_from_lines(buses, &lines)?,
            f_bar,
            p_lo: vec![0.0; buses],
            p_hi,
            d_ref,
            m_th: 100.0,
        };
        case.validate()?;
        Ok(case)
    }
}

/// PTDF for lines `(from, to, susceptance)` with bus 0 as the slack.
pub fn ptdf_from_lines(buses: usize, lines: &[(usize, usize, f64)]) -> Result<Vec<f64>> {
    let n = buses - 1;
    let mut bbus = vec![vec![0.0; n]; n];
    for &(f, t, b) in lines {
        if f >= buses || t >= buses || f == t {
            return Err(Error::InvalidModel(format!("bad line ({f}, {t})")));
        }
        for (i, j, s) in [(f, f, b), (t, t, b), (f, t, -b), (t, f, -b)] {
            if i > 0 && j > 0 {
                bbus[i - 1][j - 1] += s;
            }
        }
    }
    let inv = invert(bbus).ok_or_else(|| Error::InvalidModel("network is not connected".into()))?;
    let mut h = vec![0.0; lines.len() * buses];
    for (e, &(f, t, b)) in lines.iter().enumerate() {
        for k in 1..buses {
            let theta = |bus: usize| if bus == 0 { 0.0 } else { inv[bus - 1][k - 1] };
            h[e * buses + k] = b * (theta(f) - theta(t));
        }
    }
    Ok(h)
}

fn invert(mut a: Vec<Vec<f64>>) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut inv: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() < 1e-12 {
            return None;
        }
        a.swap(p, c);
        inv.swap(p, c);
        let d = a[c][c];
        for k in 0..n {
            a[c][k] /= d;
            inv[c][k] /= d;
        }
        for r in 0..n {
            if r != c && a[r][c] != 0.0 {
                let f = a[r][c];
                for k in 0..n {
                    a[r][k] -= f * a[c][k];
                    inv[r][k] -= f * inv[c][k];
                }
            }
        }
    }
    Some(inv)
}

/// Reads a PTDF in coordinate matrix-market form:
///
/// ```text
/// %%MatrixMarket matrix coordinate real general
/// % comments
/// <lines> <buses> <entries>
/// <row> <col> <value>        (1-based, repeated <entries> times)
/// ```
///
/// Returns `(lines, buses, row-major values)`.
pub fn read_ptdf_matrix_market(text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines.next().ok_or_else(|| Error::Schema("empty PTDF file".into()))?;
    if !header.starts_with("%%MatrixMarket") || !header.contains("coordinate") {
        return Err(Error::Schema(format!("unsupported header: {header}")));
    }
    let mut body = lines.filter(|l| !l.starts_with('%'));
    let dims: Vec<usize> = body
        .next()
        .ok_or_else(|| Error::Schema("missing size line".into()))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Schema(format!("bad size token {t}"))))
        .collect::<Result<_>>()?;
    let [rows, cols, nnz] = dims[..] else {
        return Err(Error::Schema("size line needs three integers".into()));
    };
    let mut h = vec![0.0; rows * cols];
    let mut seen = 0;
    for l in body {
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() != 3 {
            return Err(Error::Schema(format!("bad entry line: {l}")));
        }
        let bad = |_| Error::Schema(format!("bad entry line: {l}"));
        let (r, c): (usize, usize) = (t[0].parse().map_err(bad)?, t[1].parse().map_err(bad)?);
        let v: f64 = t[2].parse().map_err(|_| Error::Schema(format!("bad value in: {l}")))?;
        if r == 0 || c == 0 || r > rows || c > cols {
            return Err(Error::Schema(format!("entry out of range: {l}")));
        }
        h[(r - 1) * cols + (c - 1)] = v;
        seen += 1;
    }
    if seen != nnz {
        return Err(Error::Schema(format!("expected {nnz} entries, found {seen}")));
    }
    Ok((rows, cols, h))
}

/// Latent box `alpha in [alpha_lo, alpha_hi]` (normally `1 -+ u`) and
/// `beta in [-w, w]^B`, realized as `d_i = (alpha + beta_i) * d_ref_i`.
/// Latent vectors are `[alpha, beta...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadDomain {
    pub d_ref: Vec<f64>,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub beta_width: f64,
}

impl LoadDomain {
    pub fn new(case: &DcopfCase, u: f64) -> Self {
        LoadDomain {
            d_ref: case.d_ref.clone(),
            alpha_lo: 1.0 - u,
            alpha_hi: 1.0 + u,
            beta_width: BETA_WIDTH,
        }
    }

    /// Same domain with the per-bus noise fixed at zero.
    pub fn frozen_beta(mut self) -> Self {
        self.beta_width = 0.0;
        self
    }

    /// Half-width of the alpha interval.
    pub fn u(&self) -> f64 {
        0.5 * (self.alpha_hi - self.alpha_lo)
    }

    pub fn dim(&self) -> usize {
        1 + self.d_ref.len()
    }

    pub fn lower(&self) -> Vec<f64> {
        let mut v = vec![self.alpha_lo];
        v.extend(std::iter::repeat_n(-self.beta_width, self.d_ref.len()));
        v
    }

    pub fn upper(&self) -> Vec<f64> {
        let mut v = vec![self.alpha_hi];
        v.extend(std::iter::repeat_n(self.beta_width, self.d_ref.len()));
        v
    }

    pub fn center(&self) -> Vec<f64> {
        let mut v = vec![0.5 * (self.alpha_lo + self.alpha_hi)];
        v.extend(std::iter::repeat_n(0.0, self.d_ref.len()));
        v
    }

    pub fn load(&self, z: &[f64]) -> Vec<f64> {
        self.d_ref
            .iter()
            .enumerate()
            .map(|(i, d)| (z[0] + z[1 + i]) * d)
            .collect()
    }

    /// Chain rule from a load gradient to latent coordinates.
    pub fn latent_gradient(&self, grad_d: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for (i, (gd, d)) in grad_d.iter().zip(&self.d_ref).enumerate() {
            g[0] += gd * d;
            g[1 + i] = gd * d;
        }
        g
    }

    pub fn input_map(&self) -> InputMap {
        let b = self.d_ref.len();
        InputMap {
            m: (0..b)
                .map(|i| {
                    let mut row = vec![0.0; 1 + b];
                    row[0] = self.d_ref[i];
                    row[1 + i] = self.d_ref[i];
                    row
                })
                .collect(),
            c: vec![0.0; b],
        }
    }

    pub fn validate(&self, case: &DcopfCase) -> Result<()> {
        if self.d_ref.len() != case.buses {
            return Err(Error::DimensionMismatch("domain and case disagree on bus count".into()));
        }
        if !(self.alpha_hi >= self.alpha_lo) || !(self.beta_width >= 0.0) || !self.alpha_hi.is_finite() {
            return Err(Error::Precondition("domain widths must be nonnegative".into()));
        }
        if self.alpha_lo - self.beta_width <= 0.0 || self.d_ref.iter().any(|&d| d <= 0.0) {
            return Err(Error::Precondition("domain admits nonpositive loads".into()));
        }
        let total: f64 = self.d_ref.iter().sum();
        let (dmin, dmax) = (
            (self.alpha_lo - self.beta_width) * total,
            (self.alpha_hi + self.beta_width) * total,
        );
        let (pmin, pmax) = (case.p_lo.iter().sum::<f64>(), case.p_hi.iter().sum::<f64>());
        if dmax > pmax || dmin < pmin {
            return Err(Error::Precondition(format!(
                "total load range [{dmin}, {dmax}] not covered by capacity [{pmin}, {pmax}]"
            )));
        }
        Ok(())
    }
}

/// Eq. rows: 0 = balance, `1..=E` lower flow rows, `E+1..=2E` upper flow rows.
/// Variables: `p` (B) then `xi` (E).
pub fn build_opf_lp(case: &DcopfCase, d: &[f64]) -> LinearProgram {
    let (b, e) = (case.buses, case.lines);
    let mut lp = LinearProgram::new(Sense::Minimize);
    for i in 0..b {
        lp.add_var(case.p_lo[i], case.p_hi[i], case.c[i]);
    }
    for _ in 0..e {
        lp.add_var(0.0, f64::INFINITY, case.m_th);
    }
    let total: f64 = d.iter().sum();
    lp.add_constraint((0..b).map(|i| (i, 1.0)).collect(), Relation::Eq, total);
    let hd = case.flows(d);
    for sign in [1.0, -1.0] {
        for l in 0..e {
            let mut terms: Vec<(usize, f64)> = (0..b).map(|i| (i, sign * case.h(l, i))).collect();
            terms.push((b + l, 1.0));
            lp.add_constraint(terms, Relation::Ge, -case.f_bar[l] + sign * hd[l]);
        }
    }
    lp
}

pub fn solve_opf(case: &DcopfCase, d: &[f64]) -> Result<LpSolution> {
    let sol = solve_lp(&build_opf_lp(case, d), None)?;
    match sol.status {
        LpStatus::Optimal => Ok(sol),
        _ => Err(Error::InfeasibleLowerLevel),
    }
}

/// `grad_d Phi` from the duals of an optimal [`build_opf_lp`] solution.
pub fn value_gradient(case: &DcopfCase, sol: &LpSolution) -> Vec<f64> {
    let e = case.lines;
    let lam = sol.duals[0];
    let lower = case.flows_transpose(&sol.duals[1..1 + e]);
    let upper = case.flows_transpose(&sol.duals[1 + e..1 + 2 * e]);
    (0..case.buses).map(|i| lam + lower[i] - upper[i]).collect()
}

/// Uniform shift with `sum(clamp(p + delta, lo, hi)) = demand`, found by
/// bisection from `+-max(hi - lo)`.
pub fn hypersimplex_delta(p: &[f64], lo: &[f64], hi: &[f64], demand: f64, eps: f64) -> Result<f64> {
    let (smin, smax) = (lo.iter().sum::<f64>(), hi.iter().sum::<f64>());
    if demand < smin - eps || demand > smax + eps {
        return Err(Error::ProjectionInfeasible {
            demand,
            min: smin,
            max: smax,
        });
    }
    let f = |t: f64| -> f64 { (0..p.len()).map(|i| (p[i] + t).clamp(lo[i], hi[i])).sum() };
    let span = (0..p.len()).map(|i| hi[i] - lo[i]).fold(0.0, f64::max);
    let (mut a, mut b) = (-span, span);
    let mut t = 0.5 * (a + b);
    for _ in 0..MAX_BISECTION {
        let ft = f(t);
        if (b - a).abs() < eps && (ft - demand).abs() < eps {
            break;
        }
        if ft >= demand {
            b = t;
        } else {
            a = t;
        }
        t = 0.5 * (a + b);
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchResult {
    pub p_hat: Vec<f64>,
    pub p_clamped: Vec<f64>,
    pub delta: f64,
    pub p: Vec<f64>,
    pub flows: Vec<f64>,
    pub xi: Vec<f64>,
    pub cost: f64,
}

/// Repair layers applied to a raw prediction `p_hat` at load `d`.
pub fn repair(case: &DcopfCase, d: &[f64], p_hat: &[f64]) -> Result<DispatchResult> {
    repair_priced(case, d, p_hat, case.m_th)
}

fn repair_priced(case: &DcopfCase, d: &[f64], p_hat: &[f64], price: f64) -> Result<DispatchResult> {
    let p_clamped: Vec<f64> = (0..case.buses)
        .map(|i| p_hat[i].clamp(case.p_lo[i], case.p_hi[i]))
        .collect();
    let demand: f64 = d.iter().sum();
    let delta = hypersimplex_delta(&p_clamped, &case.p_lo, &case.p_hi, demand, EPS_PROJ)?;
    let p: Vec<f64> = (0..case.buses)
        .map(|i| (p_clamped[i] + delta).clamp(case.p_lo[i], case.p_hi[i]))
        .collect();
    let diff: Vec<f64> = p.iter().zip(d).map(|(a, b)| a - b).collect();
    let flows = case.flows(&diff);
    let xi: Vec<f64> = flows
        .iter()
        .zip(&case.f_bar)
        .map(|(f, fb)| (f - fb).max(-fb - f).max(0.0))
        .collect();
    let cost = case.c.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() + price * xi.iter().sum::<f64>();
    Ok(DispatchResult {
        p_hat: p_hat.to_vec(),
        p_clamped,
        delta,
        p,
        flows,
        xi,
        cost,
    })
}

pub fn proxy_forward(case: &DcopfCase, net: &MlpNetwork, d: &[f64]) -> Result<DispatchResult> {
    repair(case, d, &net.forward(d)?)
}

/// Subgradient of `scale * cost` through the repair layers: returns
/// `(d cost / d p_hat, direct d cost / d d)`.
fn repair_cotangent(case: &DcopfCase, r: &DispatchResult, price: f64, scale: f64) -> (Vec<f64>, Vec<f64>) {
    let (b, e) = (case.buses, case.lines);
    // thermal: active branch of max{f - fbar, -fbar - f, 0}
    let s: Vec<f64> = (0..e)
        .map(|l| {
            if r.flows[l] - case.f_bar[l] > 0.0 {
                scale * price
            } else if -case.f_bar[l] - r.flows[l] > 0.0 {
                -scale * price
            } else {
                0.0
            }
        })
        .collect();
    let hs = case.flows_transpose(&s);
    let g_p: Vec<f64> = (0..b).map(|i| scale * case.c[i] + hs[i]).collect();
    let mut g_d: Vec<f64> = hs.iter().map(|v| -v).collect();
    // hypersimplex: p = clamp(p' + delta) with delta set by the balance row
    let m: Vec<f64> = (0..b)
        .map(|i| {
            let v = r.p_clamped[i] + r.delta;
            if v > case.p_lo[i] && v < case.p_hi[i] {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let msum: f64 = m.iter().sum();
    let mut g_clamped = vec![0.0; b];
    if msum > 0.0 {
        let mg: f64 = (0..b).map(|i| m[i] * g_p[i]).sum::<f64>() / msum;
        for i in 0..b {
            g_clamped[i] = m[i] * g_p[i] - m[i] * mg;
        }
        g_d.iter_mut().for_each(|v| *v += mg);
    }
    // bound clamp
    let g_hat: Vec<f64> = (0..b)
        .map(|i| {
            let v = r.p_hat[i];
            if v > case.p_lo[i] && v < case.p_hi[i] {
                g_clamped[i]
            } else {
                0.0
            }
        })
        .collect();
    (g_hat, g_d)
}

/// Subgradient of `cost_cotangent * proxy_cost(d)` with respect to `d`.
pub fn proxy_subgradient(case: &DcopfCase, net: &MlpNetwork, d: &[f64], cost_cotangent: f64) -> Result<Vec<f64>> {
    let r = proxy_forward(case, net, d)?;
    let (g_hat, mut g_d) = repair_cotangent(case, &r, case.m_th, cost_cotangent);
    let g_net = net.input_gradient(d, &g_hat)?;
    g_d.iter_mut().zip(&g_net).for_each(|(a, b)| *a += b);
    Ok(g_d)
}

/// Trains a proxy by gradient descent on `c p + penalty * sum(xi)` of the
/// repaired dispatch. Returns the loss history.
pub fn train_proxy(
    case: &DcopfCase,
    net: &mut MlpNetwork,
    loads: &[Vec<f64>],
    epochs: usize,
    lr: f64,
    penalty: f64,
) -> Result<Vec<f64>> {
    crate::neural::toy_train(net, loads, epochs, lr, |d, out| {
        let r = repair_priced(case, d, out, penalty)?;
        let (g, _) = repair_cotangent(case, &r, penalty, 1.0);
        Ok((r.cost, g))
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Instance {
    pub gamma: f64,
    pub eta: Vec<f64>,
    pub d: Vec<f64>,
    pub phi: f64,
    pub duals: Vec<f64>,
    /// `grad_d Phi` recovered from the duals.
    pub gradient: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceSet {
    pub instances: Vec<Instance>,
    pub skipped: usize,
}

/// Loads `(gamma + eta) * d_ref` with `gamma ~ U[0.8, 1.2]` and
/// `eta ~ U[-0.05, 0.05]^B`, each solved to optimality.
pub fn generate_instances(case: &DcopfCase, n: usize, seed: u64) -> Result<InstanceSet> {
    if n == 0 {
        return Err(Error::Precondition("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|_| {
            let g = rng.gen_range(0.8..=1.2);
            let eta = (0..case.buses).map(|_| rng.gen_range(-0.05..=0.05)).collect();
            (g, eta)
        })
        .collect();
    let solved: Vec<Result<Option<Instance>>> = draws
        .into_par_iter()
        .map(|(gamma, eta)| {
            let d: Vec<f64> = case.d_ref.iter().zip(&eta).map(|(r, e)| (gamma + e) * r).collect();
            let sol = solve_lp(&build_opf_lp(case, &d), None)?;
            if sol.status != LpStatus::Optimal {
                return Ok(None);
            }
            Ok(Some(Instance {
                gamma,
                gradient: value_gradient(case, &sol),
                eta,
                d,
                phi: sol.objective,
                duals: sol.duals,
            }))
        })
        .collect();
    let mut out = InstanceSet {
        instances: Vec::with_capacity(n),
        skipped: 0,
    };
    for r in solved {
        match r? {
            Some(inst) => out.instances.push(inst),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    Compact,
    Bilevel,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FormulationSize {
    pub continuous: usize,
    pub binaries: usize,
    pub rows: usize,
}

#[derive(Clone, Debug)]
struct KktVars {
    lambda: usize,
    nu_lower: Vec<usize>,
    nu_upper: Vec<usize>,
    mu_lower: Vec<usize>,
    mu_upper: Vec<usize>,
    zeta: Vec<usize>,
    /// (binary, dual var, slack expression)
    pairs: Vec<(usize, usize, LinExpr)>,
}

/// A verification MILP over the latent load box together with what is
/// needed to complete a latent point into a full assignment.
#[derive(Clone, Debug)]
pub struct DcopfMilp {
    pub formulation: Formulation,
    pub ctx: EncodingContext,
    pub latent: Vec<usize>,
    pub p: Vec<usize>,
    pub xi: Vec<usize>,
    pub p_proxy: Vec<usize>,
    pub xi_proxy: Vec<usize>,
    pub m_dual: f64,
    kkt: Option<KktVars>,
}

impl DcopfMilp {
    pub fn problem(&self) -> MilpProblem {
        self.ctx.clone().into_problem()
    }

    /// Sizes as built, and as they would be without removing stable neurons.
    pub fn sizes(&self) -> (FormulationSize, FormulationSize) {
        let after = FormulationSize {
            continuous: self.ctx.num_vars() - self.ctx.binaries.len(),
            binaries: self.ctx.binaries.len(),
            rows: self.ctx.lp.num_rows(),
        };
        let before = FormulationSize {
            continuous: after.continuous,
            binaries: after.binaries + self.ctx.eliminated_binaries,
            rows: after.rows + self.ctx.eliminated_rows,
        };
        (before, after)
    }

    /// Full assignment at latent point `z`: the proxy part is replayed and
    /// the lower level is filled from an LP solve (with its duals for KKT).
    pub fn complete(&self, case: &DcopfCase, domain: &LoadDomain, z: &[f64]) -> Result<Vec<f64>> {
        let mut x = vec![0.0; self.ctx.num_vars()];
        for (k, &v) in self.latent.iter().enumerate() {
            x[v] = z[k];
        }
        let d = domain.load(z);
        let sol = solve_opf(case, &d)?;
        for (i, &v) in self.p.iter().enumerate() {
            x[v] = sol.x[i];
        }
        for (l, &v) in self.xi.iter().enumerate() {
            x[v] = sol.x[case.buses + l];
        }
        if let Some(k) = &self.kkt {
            let e = case.lines;
            x[k.lambda] = sol.duals[0];
            for l in 0..e {
                x[k.nu_lower[l]] = sol.duals[1 + l].max(0.0);
                x[k.nu_upper[l]] = sol.duals[1 + e + l].max(0.0);
                x[k.zeta[l]] = (case.m_th - x[k.nu_lower[l]] - x[k.nu_upper[l]]).max(0.0);
            }
            let nl: Vec<f64> = k.nu_lower.iter().map(|&v| x[v]).collect();
            let nu: Vec<f64> = k.nu_upper.iter().map(|&v| x[v]).collect();
            let (hl, hu) = (case.flows_transpose(&nl), case.flows_transpose(&nu));
            for i in 0..case.buses {
                let mu = case.c[i] - x[k.lambda] - hl[i] + hu[i];
                x[k.mu_lower[i]] = mu.max(0.0);
                x[k.mu_upper[i]] = (-mu).max(0.0);
            }
            for (bin, dual, slack) in &k.pairs {
                x[*bin] = if x[*dual] > 0.0 || slack.value(&x) <= 1e-9 {
                    1.0
                } else {
                    0.0
                };
            }
        }
        self.ctx.replay(&mut x)?;
        Ok(x)
    }

    /// Largest LP dual magnitude at load `d` among those bounded by `m_dual`.
    pub fn dual_magnitude(&self, case: &DcopfCase, d: &[f64]) -> Result<f64> {
        let sol = solve_opf(case, d)?;
        let rc = sol.reduced_costs[..case.buses].iter().map(|v| v.abs());
        Ok(rc.chain(std::iter::once(sol.duals[0].abs())).fold(0.0, f64::max))
    }
}

/// `d` as expressions in the latent variables.
fn load_exprs(domain: &LoadDomain, latent: &[usize]) -> Vec<LinExpr> {
    domain.input_map().exprs(latent)
}

/// Proxy pipeline and lower-level primal block shared by both formulations.
fn build_common(
    case: &DcopfCase,
    net: &MlpNetwork,
    domain: &LoadDomain,
    bounds: &LayerBounds,
    formulation: Formulation,
) -> Result<DcopfMilp> {
    case.validate()?;
    domain.validate(case)?;
    if net.input_dim() != case.buses || net.output_dim() != case.buses {
        return Err(Error::DimensionMismatch(format!(
            "network maps {} -> {}, case has {} buses",
            net.input_dim(),
            net.output_dim(),
            case.buses
        )));
    }
    let (b, e) = (case.buses, case.lines);
    let mut ctx = EncodingContext::new(Sense::Maximize);
    let (zl, zu) = (domain.lower(), domain.upper());
    let latent: Vec<usize> = (0..domain.dim())
        .map(|k| {
            let name = if k == 0 {
                "alpha".to_string()
            } else {
                format!("beta{}", k - 1)
            };
            ctx.add_var(name, zl[k], zu[k])
        })
        .collect();
    let d = load_exprs(domain, &latent);
    let outs = encode_network(&mut ctx, "nn", net, &d, bounds)?;

    // bound clamp
    let last = bounds.lower.len() - 1;
    let mut clamped = Vec::with_capacity(b);
    for i in 0..b {
        let yb = (bounds.lower[last][i], bounds.upper[last][i]);
        let v = encode_clamp(
            &mut ctx,
            &format!("clamp{i}"),
            &LinExpr::var(outs[i]),
            case.p_lo[i],
            case.p_hi[i],
            yb,
        )?;
        clamped.push(v);
    }

    // hypersimplex: shared shift, per-generator clamp, balance row
    let span = (0..b).map(|i| case.p_hi[i] - case.p_lo[i]).fold(0.0, f64::max);
    let delta = ctx.add_var("delta", -span, span);
    let mut total = LinExpr::constant(0.0);
    for di in &d {
        total.axpy(1.0, di);
    }
    ctx.ops.push(Op::UniformShift {
        delta,
        base: clamped.iter().map(|&v| LinExpr::var(v)).collect(),
        lo: case.p_lo.clone(),
        hi: case.p_hi.clone(),
        total: total.clone(),
    });
    let mut p_proxy = Vec::with_capacity(b);
    for i in 0..b {
        let mut y = LinExpr::var(clamped[i]);
        y.add_term(delta, 1.0);
        let yb = ctx.bounds_of(&y);
        p_proxy.push(encode_clamp(
            &mut ctx,
            &format!("shift{i}"),
            &y,
            case.p_lo[i],
            case.p_hi[i],
            yb,
        )?);
    }
    let mut gen = LinExpr::constant(0.0);
    p_proxy.iter().for_each(|&v| gen.add_term(v, 1.0));
    ctx.constrain(&gen, Relation::Eq, &total);

    // thermal violation of the repaired dispatch
    let mut xi_proxy = Vec::with_capacity(e);
    for l in 0..e {
        let mut f = LinExpr::constant(0.0);
        for i in 0..b {
            f.add_term(p_proxy[i], case.h(l, i));
            f.axpy(-case.h(l, i), &d[i]);
        }
        let f = f.normalized();
        let (fl, fu) = ctx.bounds_of(&f);
        let fb = case.f_bar[l];
        let mut up = f.clone();
        up.constant -= fb;
        let mut down = f.scaled(-1.0);
        down.constant -= fb;
        let exprs = [up, down, LinExpr::constant(0.0)];
        let eb = [(fl - fb, fu - fb), (-fu - fb, -fl - fb), (0.0, 0.0)];
        xi_proxy.push(encode_max_of(&mut ctx, &format!("xi_proxy{l}"), &exprs, &eb)?);
    }

    // lower-level primal feasibility on free (p, xi)
    let p: Vec<usize> = (0..b)
        .map(|i| ctx.add_external(format!("p{i}"), case.p_lo[i], case.p_hi[i]))
        .collect();
    let xi: Vec<usize> = (0..e)
        .map(|l| ctx.add_external(format!("xi{l}"), 0.0, f64::INFINITY))
        .collect();
    let mut sp = LinExpr::constant(0.0);
    p.iter().for_each(|&v| sp.add_term(v, 1.0));
    ctx.constrain(&sp, Relation::Eq, &total);
    for sign in [1.0, -1.0] {
        for l in 0..e {
            let mut lhs = LinExpr::var(xi[l]);
            let mut rhs = LinExpr::constant(-case.f_bar[l]);
            for i in 0..b {
                lhs.add_term(p[i], sign * case.h(l, i));
                rhs.axpy(sign * case.h(l, i), &d[i]);
            }
            ctx.constrain(&lhs, Relation::Ge, &rhs);
        }
    }

    let mut obj = LinExpr::constant(0.0);
    for i in 0..b {
        obj.add_term(p_proxy[i], case.c[i]);
        obj.add_term(p[i], -case.c[i]);
    }
    for l in 0..e {
        obj.add_term(xi_proxy[l], case.m_th);
        obj.add_term(xi[l], -case.m_th);
    }
    ctx.set_objective(&obj);

    Ok(DcopfMilp {
        formulation,
        ctx,
        latent,
        p,
        xi,
        p_proxy,
        xi_proxy,
        m_dual: 0.0,
        kkt: None,
    })
}

/// `max over the latent box of proxy cost - Phi`: the lower level is replaced
/// by plain feasibility of `(p, xi)`, and the objective's minus sign makes the
/// maximization pick the optimal `(p, xi)`.
pub fn build_compact_milp(
    case: &DcopfCase,
    net: &MlpNetwork,
    domain: &LoadDomain,
    bounds: &LayerBounds,
) -> Result<DcopfMilp> {
    build_common(case, net, domain, bounds, Formulation::Compact)
}

/// KKT reformulation: primal feasibility, dual feasibility and big-M
/// complementarity. Thermal duals are bounded by `M_th`; the balance and
/// bound duals by `m_dual`.
pub fn build_bilevel_milp(
    case: &DcopfCase,
    net: &MlpNetwork,
    domain: &LoadDomain,
    bounds: &LayerBounds,
    m_dual: f64,
) -> Result<DcopfMilp> {
    if !(m_dual > 0.0) || !m_dual.is_finite() {
        return Err(Error::Precondition("m_dual must be positive and finite".into()));
    }
    let mut milp = build_common(case, net, domain, bounds, Formulation::Bilevel)?;
    milp.m_dual = m_dual;
    let (b, e) = (case.buses, case.lines);
    let ctx = &mut milp.ctx;
    let d = load_exprs(domain, &milp.latent);

    // a KKT point has xi = max(|flow| - fbar, 0); bound it over the box
    for l in 0..e {
        let mut f = LinExpr::constant(0.0);
        for i in 0..b {
            f.add_term(milp.p[i], case.h(l, i));
            f.axpy(-case.h(l, i), &d[i]);
        }
        let (fl, fu) = ctx.bounds_of(&f.normalized());
        ctx.lp.upper[milp.xi[l]] = (fu.max(-fl) - case.f_bar[l]).max(0.0);
    }

    let lambda = ctx.add_external("lambda", -m_dual, m_dual);
    let nu_lower: Vec<usize> = (0..e)
        .map(|l| ctx.add_external(format!("nu_lo{l}"), 0.0, case.m_th))
        .collect();
    let nu_upper: Vec<usize> = (0..e)
        .map(|l| ctx.add_external(format!("nu_hi{l}"), 0.0, case.m_th))
        .collect();
    let zeta: Vec<usize> = (0..e)
        .map(|l| ctx.add_external(format!("zeta{l}"), 0.0, case.m_th))
        .collect();
    let mu_lower: Vec<usize> = (0..b)
        .map(|i| ctx.add_external(format!("mu_lo{i}"), 0.0, m_dual))
        .collect();
    let mu_upper: Vec<usize> = (0..b)
        .map(|i| ctx.add_external(format!("mu_hi{i}"), 0.0, m_dual))
        .collect();

    // stationarity in p and xi
    for i in 0..b {
        let mut s = LinExpr::var(lambda);
        for l in 0..e {
            s.add_term(nu_lower[l], case.h(l, i));
            s.add_term(nu_upper[l], -case.h(l, i));
        }
        s.add_term(mu_lower[i], 1.0);
        s.add_term(mu_upper[i], -1.0);
        ctx.constrain(&s, Relation::Eq, &LinExpr::constant(case.c[i]));
    }
    for l in 0..e {
        let mut s = LinExpr::var(nu_lower[l]);
        s.add_term(nu_upper[l], 1.0);
        s.add_term(zeta[l], 1.0);
        ctx.constrain(&s, Relation::Eq, &LinExpr::constant(case.m_th));
    }

    // complementarity: dual <= M z, slack <= S (1 - z)
    let mut pairs = Vec::new();
    let mut slacks: Vec<(String, usize, LinExpr)> = Vec::new();
    for (sign, tag, duals) in [(1.0, "lo", &nu_lower), (-1.0, "hi", &nu_upper)] {
        for l in 0..e {
            let mut s = LinExpr::var(milp.xi[l]);
            s.constant += case.f_bar[l];
            for i in 0..b {
                s.add_term(milp.p[i], sign * case.h(l, i));
                s.axpy(-sign * case.h(l, i), &d[i]);
            }
            slacks.push((format!("cs_nu_{tag}{l}"), duals[l], s.normalized()));
        }
    }
    for i in 0..b {
        let mut s = LinExpr::var(milp.p[i]);
        s.constant -= case.p_lo[i];
        slacks.push((format!("cs_mu_lo{i}"), mu_lower[i], s));
        let mut s = LinExpr::var(milp.p[i]).scaled(-1.0);
        s.constant += case.p_hi[i];
        slacks.push((format!("cs_mu_hi{i}"), mu_upper[i], s));
    }
    for l in 0..e {
        slacks.push((format!("cs_zeta{l}"), zeta[l], LinExpr::var(milp.xi[l])));
    }
    for (name, dual, slack) in slacks {
        let (_, smax) = ctx.bounds_of(&slack);
        let dmax = ctx.lp.upper[dual];
        if !smax.is_finite() || !dmax.is_finite() {
            return Err(Error::InfiniteBound(name));
        }
        let z = ctx.add_external_binary(name);
        let mut mz = LinExpr::constant(0.0);
        mz.add_term(z, dmax);
        ctx.constrain(&LinExpr::var(dual), Relation::Le, &mz);
        let mut rest = LinExpr::constant(smax.max(0.0));
        rest.add_term(z, -smax.max(0.0));
        ctx.constrain(&slack, Relation::Le, &rest);
        pairs.push((z, dual, slack));
    }
    // objective coefficients for the new columns
    ctx.lp.objective.resize(ctx.num_vars(), 0.0);
    milp.kkt = Some(KktVars {
        lambda,
        nu_lower,
        nu_upper,
        mu_lower,
        mu_upper,
        zeta,
        pairs,
    });
    Ok(milp)
}
