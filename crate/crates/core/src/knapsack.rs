//! 0/1 knapsack: exact solvers, the score-and-greedy proxy, and its compact
//! verification MILP built on a permutation-matrix encoding of the sort.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dcopf::FormulationSize;
use crate::encodings::{encode_binary_product, encode_network, EncodingContext, InputMap, LinExpr};
use crate::error::{Error, Result};
use crate::lp::{Relation, Sense};
use crate::milp::MilpProblem;
use crate::neural::{LayerBounds, MlpNetwork};

/// Largest item count solved by enumeration.
pub const ENUM_MAX_ITEMS: usize = 25;
/// Sliver kept between the scaled capacity and the next integer.
pub const CAP_EPS: f64 = 1e-7;
const INT_SCALE_TOL: f64 = 1e-6;
const DP_MAX_CAPACITY: f64 = 1e7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnapsackCase {
    #[serde(rename = "K")]
    pub k: usize,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub l: f64,
}

impl KnapsackCase {
    pub fn validate(&self) -> Result<()> {
        if self.v.len() != self.k || self.w.len() != self.k {
            return Err(Error::Schema(format!(
                "K = {} but v has {} and w has {} entries",
                self.k,
                self.v.len(),
                self.w.len()
            )));
        }
        if self.v.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::Schema("values must be finite and nonnegative".into()));
        }
        if self.w.iter().any(|&x| !x.is_finite() || x <= 0.0) {
            return Err(Error::Schema("weights must be finite and positive".into()));
        }
        if !self.l.is_finite() || self.l <= 0.0 {
            return Err(Error::Schema("capacity must be finite and positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let case: KnapsackCase = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        case.validate()?;
        Ok(case)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Five items with integer weights and capacity.
    pub fn desk() -> Self {
        KnapsackCase {
            k: 5,
            v: vec![12.0, 7.0, 9.0, 4.0, 15.0],
            w: vec![5.0, 3.0, 4.0, 2.0, 7.0],
            l: 10.0,
        }
    }

    /// Ten items extending [`Self::desk`].
    pub fn desk_ten() -> Self {
        KnapsackCase {
            k: 10,
            v: vec![12.0, 7.0, 9.0, 4.0, 15.0, 3.0, 8.0, 11.0, 6.0, 5.0],
            w: vec![5.0, 3.0, 4.0, 2.0, 7.0, 1.0, 4.0, 6.0, 3.0, 3.0],
            l: 20.0,
        }
    }

    /// Integer weights in `1..=9`, values in `[1, 20)`, capacity about half
    /// the total weight.
    pub fn random(k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..k).map(|_| rng.gen_range(1..=9) as f64).collect();
        let v = (0..k).map(|_| rng.gen_range(1.0..20.0)).collect();
        let l = (w.iter().sum::<f64>() / 2.0).floor().max(1.0);
        KnapsackCase { k, v, w, l }
    }
}

/// Latent box `alpha in [1-u, 1+u]` scaling `l` and `beta in [1-u, 1+u]^K`
/// scaling `v`. Latent vectors are `[alpha, beta...]`; the network sees
/// `(beta * v, alpha * l)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnapsackDomain {
    pub v: Vec<f64>,
    pub l: f64,
    pub u: f64,
}

impl KnapsackDomain {
    pub fn new(case: &KnapsackCase, u: f64) -> Self {
        KnapsackDomain {
            v: case.v.clone(),
            l: case.l,
            u,
        }
    }

    pub fn dim(&self) -> usize {
        1 + self.v.len()
    }

    pub fn lower(&self) -> Vec<f64> {
        vec![1.0 - self.u; self.dim()]
    }

    pub fn upper(&self) -> Vec<f64> {
        vec![1.0 + self.u; self.dim()]
    }

    pub fn center(&self) -> Vec<f64> {
        vec![1.0; self.dim()]
    }

    /// `(v, l)` at latent point `z`.
    pub fn instance(&self, z: &[f64]) -> (Vec<f64>, f64) {
        let v = self.v.iter().enumerate().map(|(i, v)| z[1 + i] * v).collect();
        (v, z[0] * self.l)
    }

    /// Network input `(v, l)` at `z`.
    pub fn input(&self, z: &[f64]) -> Vec<f64> {
        let (mut v, l) = self.instance(z);
        v.push(l);
        v
    }

    pub fn input_map(&self) -> InputMap {
        let k = self.v.len();
        let mut m = vec![vec![0.0; 1 + k]; k + 1];
        for i in 0..k {
            m[i][1 + i] = self.v[i];
        }
        m[k][0] = self.l;
        InputMap { m, c: vec![0.0; k + 1] }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.u >= 0.0) || 1.0 - self.u <= 0.0 {
            return Err(Error::Precondition(format!("u = {} must lie in [0, 1)", self.u)));
        }
        Ok(())
    }
}

/// Visits items by descending score (ties by index) and takes each one that
/// fits, stopping at the first that does not.
pub fn greedy_repair(s: &[f64], w: &[f64], l: f64) -> Vec<u8> {
    let mut y = vec![0u8; s.len()];
    let mut used = 0.0;
    for i in sort_order(s) {
        if used + w[i] > l {
            break;
        }
        used += w[i];
        y[i] = 1;
    }
    y
}

/// Item indices by descending score, ties by ascending index.
pub fn sort_order(s: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    order
}

pub fn heuristic_scores(v: &[f64], w: &[f64]) -> Vec<f64> {
    v.iter().zip(w).map(|(v, w)| v / w).collect()
}

fn value_of(v: &[f64], y: &[u8]) -> f64 {
    v.iter().zip(y).map(|(v, &y)| v * y as f64).sum()
}

/// Exact optimum: enumeration up to [`ENUM_MAX_ITEMS`], dynamic programming
/// over integer weights beyond.
pub fn knapsack_exact(v: &[f64], w: &[f64], l: f64) -> Result<(f64, Vec<u8>)> {
    if v.len() != w.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} values, {} weights",
            v.len(),
            w.len()
        )));
    }
    if v.len() <= ENUM_MAX_ITEMS {
        Ok(knapsack_enumerate(v, w, l))
    } else {
        knapsack_dp(v, w, l)
    }
}

/// Gray-code walk over all subsets; the lowest mask wins ties.
pub fn knapsack_enumerate(v: &[f64], w: &[f64], l: f64) -> (f64, Vec<u8>) {
    let k = v.len();
    let (mut tv, mut tw) = (0.0, 0.0);
    let mut best = (0.0, 0u64);
    let mut gray = 0u64;
    for step in 1u64..(1u64 << k) {
        let bit = step.trailing_zeros() as usize;
        gray ^= 1 << bit;
        if gray >> bit & 1 == 1 {
            tv += v[bit];
            tw += w[bit];
        } else {
            tv -= v[bit];
            tw -= w[bit];
        }
        // recompute occasionally to keep running sums honest
        if step % 4096 == 0 {
            tv = (0..k).filter(|i| gray >> i & 1 == 1).map(|i| v[i]).sum();
            tw = (0..k).filter(|i| gray >> i & 1 == 1).map(|i| w[i]).sum();
        }
        if tw <= l + 1e-9 && (tv > best.0 + 1e-12 || (tv >= best.0 - 1e-12 && gray < best.1)) {
            best = (tv, gray);
        }
    }
    let y: Vec<u8> = (0..k).map(|i| (best.1 >> i & 1) as u8).collect();
    (value_of(v, &y), y)
}

/// DP over capacity `floor(l)` with integer weights.
pub fn knapsack_dp(v: &[f64], w: &[f64], l: f64) -> Result<(f64, Vec<u8>)> {
    let wi = integer_weights(w)?;
    if l < 0.0 {
        return Ok((0.0, vec![0; v.len()]));
    }
    let cap = l.floor();
    if cap > DP_MAX_CAPACITY {
        return Err(Error::BudgetExceeded(format!(
            "capacity {cap} too large for dynamic programming"
        )));
    }
    let cap = cap as usize;
    let k = v.len();
    let mut table = vec![vec![0.0f64; cap + 1]; k + 1];
    for i in 1..=k {
        let wt = wi[i - 1] as usize;
        for c in 0..=cap {
            let skip = table[i - 1][c];
            table[i][c] = if wt <= c {
                skip.max(table[i - 1][c - wt] + v[i - 1])
            } else {
                skip
            };
        }
    }
    let mut y = vec![0u8; k];
    let mut c = cap;
    for i in (1..=k).rev() {
        if table[i][c] != table[i - 1][c] {
            y[i - 1] = 1;
            c -= wi[i - 1] as usize;
        }
    }
    Ok((value_of(v, &y), y))
}

fn integer_weights(w: &[f64]) -> Result<Vec<i64>> {
    w.iter()
        .map(|&x| {
            let r = x.round();
            if (x - r).abs() > INT_SCALE_TOL * x.abs().max(1.0) || r < 0.0 {
                Err(Error::Precondition(format!("weight {x} is not a nonnegative integer")))
            } else {
                Ok(r as i64)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnapsackEval {
    pub scores: Vec<f64>,
    pub y_hat: Vec<u8>,
    pub proxy_value: f64,
    pub y_opt: Vec<u8>,
    pub phi: f64,
    pub gap: f64,
}

/// Proxy and exact solution at latent point `z`; the gap is `Phi - proxy`.
pub fn evaluate(case: &KnapsackCase, net: &MlpNetwork, domain: &KnapsackDomain, z: &[f64]) -> Result<KnapsackEval> {
    let (v, l) = domain.instance(z);
    let scores = net.forward(&domain.input(z))?;
    let y_hat = greedy_repair(&scores, &case.w, l);
    let proxy_value = value_of(&v, &y_hat);
    let (phi, y_opt) = knapsack_exact(&v, &case.w, l)?;
    Ok(KnapsackEval {
        scores,
        y_hat,
        proxy_value,
        y_opt,
        phi,
        gap: phi - proxy_value,
    })
}

/// Fits the score network to `v / w` by mean squared error on `n` uniform
/// latent samples. Returns the loss history.
pub fn train_scores(
    case: &KnapsackCase,
    net: &mut MlpNetwork,
    domain: &KnapsackDomain,
    n: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (domain.lower(), domain.upper());
    let inputs: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..lo.len())
                .map(|k| {
                    if lo[k] < hi[k] {
                        rng.gen_range(lo[k]..=hi[k])
                    } else {
                        lo[k]
                    }
                })
                .collect();
            domain.input(&z)
        })
        .collect();
    let k = case.k;
    crate::neural::toy_train(net, &inputs, epochs, lr, |x, s| {
        let target = heuristic_scores(&x[..k], &case.w);
        let mut loss = 0.0;
        let mut grad = vec![0.0; k];
        for i in 0..k {
            let r = s[i] - target[i];
            loss += r * r / k as f64;
            grad[i] = 2.0 * r / k as f64;
        }
        Ok((loss, grad))
    })
}

/// Variables of the sort-and-select block.
#[derive(Clone, Debug)]
pub struct RepairBlock {
    /// `perm[i][k] = 1` puts item `i` at sorted position `k`.
    pub perm: Vec<Vec<usize>>,
    pub y_hat: Vec<usize>,
}

/// Encodes `y_hat = greedy_repair(scores, w, cap)` for an integer-valued
/// capacity expression `cap` and integer weights.
pub fn encode_greedy_repair(
    ctx: &mut EncodingContext,
    name: &str,
    scores: &[LinExpr],
    score_bounds: &[(f64, f64)],
    w: &[f64],
    cap: &LinExpr,
) -> Result<RepairBlock> {
    let k = scores.len();
    if score_bounds.len() != k || w.len() != k {
        return Err(Error::DimensionMismatch("scores, bounds and weights disagree".into()));
    }
    integer_weights(w)?;
    let perm: Vec<Vec<usize>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|p| ctx.add_external_binary(format!("{name}.P{i}_{p}")))
                .collect()
        })
        .collect();
    let y_hat: Vec<usize> = (0..k)
        .map(|i| ctx.add_external_binary(format!("{name}.yhat{i}")))
        .collect();
    let one = LinExpr::constant(1.0);
    for i in 0..k {
        let mut row = LinExpr::constant(0.0);
        let mut col = LinExpr::constant(0.0);
        for p in 0..k {
            row.add_term(perm[i][p], 1.0);
            col.add_term(perm[p][i], 1.0);
        }
        ctx.constrain(&row, Relation::Eq, &one);
        ctx.constrain(&col, Relation::Eq, &one);
    }

    // sorted scores and selections
    let mut s_sorted = Vec::with_capacity(k);
    let mut y_sorted = Vec::with_capacity(k);
    let mut w_sorted = Vec::with_capacity(k);
    for p in 0..k {
        let (mut s, mut y, mut ws) = (LinExpr::constant(0.0), LinExpr::constant(0.0), LinExpr::constant(0.0));
        for i in 0..k {
            let sp = encode_binary_product(
                ctx,
                &format!("{name}.Ps{i}_{p}"),
                perm[i][p],
                &scores[i],
                score_bounds[i],
            )?;
            s.add_term(sp, 1.0);
            let yp = encode_binary_product(
                ctx,
                &format!("{name}.Py{i}_{p}"),
                perm[i][p],
                &LinExpr::var(y_hat[i]),
                (0.0, 1.0),
            )?;
            y.add_term(yp, 1.0);
            ws.add_term(perm[i][p], w[i]);
        }
        s_sorted.push(s);
        y_sorted.push(y);
        w_sorted.push(ws);
    }
    for p in 0..k.saturating_sub(1) {
        ctx.constrain(&s_sorted[p], Relation::Ge, &s_sorted[p + 1]);
        ctx.constrain(&y_sorted[p], Relation::Ge, &y_sorted[p + 1]);
    }

    let mut load = LinExpr::constant(0.0);
    for i in 0..k {
        load.add_term(y_hat[i], w[i]);
    }
    ctx.constrain(&load, Relation::Le, cap);

    // an unselected position means the prefix through it overflows:
    // sum_{q<=p} w_sorted_q >= (1 - y_sorted_p)(cap + 1), with the product
    // replaced by its value at y_sorted_p = 1, where the row is slack anyway
    let (_, cap_hi) = ctx.bounds_of(cap);
    let mut prefix = LinExpr::constant(0.0);
    for p in 0..k {
        prefix.axpy(1.0, &w_sorted[p]);
        let mut rhs = cap.clone();
        rhs.constant += 1.0;
        rhs.axpy(-(cap_hi + 1.0), &y_sorted[p]);
        ctx.constrain(&prefix, Relation::Ge, &rhs);
    }
    Ok(RepairBlock { perm, y_hat })
}

/// Compact verification MILP for a knapsack proxy.
#[derive(Clone, Debug)]
pub struct KnapsackMilp {
    pub ctx: EncodingContext,
    pub latent: Vec<usize>,
    pub scores: Vec<usize>,
    pub repair: RepairBlock,
    pub y: Vec<usize>,
    /// `(capacity value, indicator)`
    pub capacity: Vec<(i64, usize)>,
}

impl KnapsackMilp {
    pub fn problem(&self) -> MilpProblem {
        self.ctx.clone().into_problem()
    }

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

    /// Full assignment at latent point `z`.
    pub fn complete(
        &self,
        case: &KnapsackCase,
        net: &MlpNetwork,
        domain: &KnapsackDomain,
        z: &[f64],
    ) -> Result<Vec<f64>> {
        let mut x = vec![0.0; self.ctx.num_vars()];
        for (k, &v) in self.latent.iter().enumerate() {
            x[v] = z[k];
        }
        let e = evaluate(case, net, domain, z)?;
        let (_, l) = domain.instance(z);
        for (p, &i) in sort_order(&e.scores).iter().enumerate() {
            x[self.repair.perm[i][p]] = 1.0;
        }
        for i in 0..case.k {
            x[self.repair.y_hat[i]] = e.y_hat[i] as f64;
            x[self.y[i]] = e.y_opt[i] as f64;
        }
        let cap = l.floor() as i64;
        for &(c, v) in &self.capacity {
            x[v] = if c == cap { 1.0 } else { 0.0 };
        }
        self.ctx.replay(&mut x)?;
        Ok(x)
    }
}

/// `max over the latent box of Phi - proxy value`, with the optimal
/// selection `y` left free subject to capacity.
pub fn build_knapsack_compact_milp(
    case: &KnapsackCase,
    net: &MlpNetwork,
    domain: &KnapsackDomain,
    bounds: &LayerBounds,
) -> Result<KnapsackMilp> {
    case.validate()?;
    domain.validate()?;
    if domain.v.len() != case.k {
        return Err(Error::DimensionMismatch(
            "domain and case disagree on item count".into(),
        ));
    }
    if net.input_dim() != case.k + 1 || net.output_dim() != case.k {
        return Err(Error::DimensionMismatch(format!(
            "network maps {} -> {}, expected {} -> {}",
            net.input_dim(),
            net.output_dim(),
            case.k + 1,
            case.k
        )));
    }
    integer_weights(&case.w)?;
    let k = case.k;
    let mut ctx = EncodingContext::new(Sense::Maximize);
    let (zl, zu) = (domain.lower(), domain.upper());
    let latent: Vec<usize> = (0..domain.dim())
        .map(|j| {
            let name = if j == 0 {
                "alpha".to_string()
            } else {
                format!("beta{}", j - 1)
            };
            ctx.add_var(name, zl[j], zu[j])
        })
        .collect();
    let inputs = domain.input_map().exprs(&latent);
    let scores = encode_network(&mut ctx, "nn", net, &inputs, bounds)?;
    let last = bounds.lower.len() - 1;
    let sb: Vec<(f64, f64)> = (0..k).map(|i| (bounds.lower[last][i], bounds.upper[last][i])).collect();

    // integer capacity floor(alpha l), one-hot
    let (cap_lo, cap_hi) = ((zl[0] * case.l).floor() as i64, (zu[0] * case.l).floor() as i64);
    let capacity: Vec<(i64, usize)> = (cap_lo..=cap_hi)
        .map(|c| (c, ctx.add_external_binary(format!("cap{c}"))))
        .collect();
    let (mut sum, mut cap, mut above) = (
        LinExpr::constant(0.0),
        LinExpr::constant(0.0),
        LinExpr::constant(-CAP_EPS),
    );
    for &(c, v) in &capacity {
        sum.add_term(v, 1.0);
        cap.add_term(v, c as f64);
        above.add_term(v, (c + 1) as f64);
    }
    ctx.constrain(&sum, Relation::Eq, &LinExpr::constant(1.0));
    ctx.constrain(&cap, Relation::Le, &inputs[k]);
    ctx.constrain(&inputs[k], Relation::Le, &above);

    let score_exprs: Vec<LinExpr> = scores.iter().map(|&s| LinExpr::var(s)).collect();
    let repair = encode_greedy_repair(&mut ctx, "repair", &score_exprs, &sb, &case.w, &cap)?;

    let y: Vec<usize> = (0..k).map(|i| ctx.add_external_binary(format!("y{i}"))).collect();
    let mut load = LinExpr::constant(0.0);
    for i in 0..k {
        load.add_term(y[i], case.w[i]);
    }
    ctx.constrain(&load, Relation::Le, &cap);

    // sum_i v_i beta_i (y_i - y_hat_i)
    let mut obj = LinExpr::constant(0.0);
    for i in 0..k {
        let beta = LinExpr::var(latent[1 + i]);
        let bb = (zl[1 + i], zu[1 + i]);
        let a = encode_binary_product(&mut ctx, &format!("vy{i}"), y[i], &beta, bb)?;
        let b = encode_binary_product(&mut ctx, &format!("vyhat{i}"), repair.y_hat[i], &beta, bb)?;
        obj.add_term(a, case.v[i]);
        obj.add_term(b, -case.v[i]);
    }
    ctx.set_objective(&obj);

    Ok(KnapsackMilp {
        ctx,
        latent,
        scores,
        repair,
        y,
        capacity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy_repair(&[3.0, 1.0, 2.0], &[2.0, 2.0, 2.0], 4.0), vec![1, 0, 1]);
        assert_eq!(greedy_repair(&[3.0, 1.0, 2.0], &[2.0, 2.0, 2.0], 0.0), vec![0, 0, 0]);
        assert_eq!(greedy_repair(&[3.0, 1.0, 2.0], &[2.0, 2.0, 2.0], 6.0), vec![1, 1, 1]);
        // halts at the first misfit even if a later item would fit
        assert_eq!(greedy_repair(&[3.0, 2.0, 1.0], &[2.0, 5.0, 1.0], 4.0), vec![1, 0, 0]);
        // ties go to the lower index
        assert_eq!(greedy_repair(&[1.0, 1.0], &[3.0, 3.0], 4.0), vec![1, 0]);
    }

    #[test]
    fn heuristic_examples() {
        assert_eq!(heuristic_scores(&[4.0, 2.0], &[2.0, 2.0]), vec![2.0, 1.0]);
        assert_eq!(heuristic_scores(&[0.0, 0.0], &[3.0, 1.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn exact_examples() {
        assert_eq!(
            knapsack_exact(&[4.0, 2.0], &[2.0, 2.0], 2.0).unwrap(),
            (4.0, vec![1, 0])
        );
        assert_eq!(knapsack_exact(&[4.0, 2.0], &[2.0, 2.0], 0.0).unwrap().0, 0.0);
        assert_eq!(knapsack_dp(&[4.0, 2.0], &[2.0, 2.0], 2.0).unwrap().0, 4.0);
        assert!(knapsack_dp(&[1.0], &[0.5], 2.0).is_err());
    }

    #[test]
    fn case_json_and_validation() {
        let c = KnapsackCase::desk();
        let back = KnapsackCase::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(c, back);
        assert!(KnapsackCase::from_json(r#"{"K": 2, "v": [1, 2], "w": [1, 0], "l": 3}"#).is_err());
        assert!(KnapsackCase::from_json(r#"{"K": 3, "v": [1, 2], "w": [1, 1], "l": 3}"#).is_err());
    }

    #[test]
    fn builder_rejects_fractional_weights() {
        let mut c = KnapsackCase::desk();
        c.w[0] = 2.5;
        let net = MlpNetwork::random(&[6, 4, 5], 0).unwrap();
        let d = KnapsackDomain::new(&c, 0.1);
        let b = crate::encodings::ibp_mapped(&net, &d.input_map(), &d.lower(), &d.upper()).unwrap();
        assert!(matches!(
            build_knapsack_compact_milp(&c, &net, &d, &b),
            Err(Error::Precondition(_))
        ));
    }
}
