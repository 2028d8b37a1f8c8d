//! MILP building blocks for networks and repair operators, plus interval and
//! optimization-based bound tightening.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::{solve_lp, LinearProgram, LpStatus, Relation, Sense};
use crate::milp::{solve_milp, Limits, MilpProblem, MilpStatus};
use crate::neural::{Activation, LayerBounds, MlpNetwork};

/// Outward padding applied to every OBBT bound.
pub const OBBT_PAD: f64 = 1e-7;

/// `constant + sum(coef * x[var])`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn var(j: usize) -> Self {
        LinExpr {
            terms: vec![(j, 1.0)],
            constant: 0.0,
        }
    }

    pub fn constant(c: f64) -> Self {
        LinExpr {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(j, a)| a * x[j]).sum::<f64>()
    }

    pub fn add_term(&mut self, j: usize, a: f64) {
        if a != 0.0 {
            self.terms.push((j, a));
        }
    }

    /// `self + k * other`
    pub fn axpy(&mut self, k: f64, other: &LinExpr) {
        for &(j, a) in &other.terms {
            self.add_term(j, k * a);
        }
        self.constant += k * other.constant;
    }

    pub fn scaled(&self, k: f64) -> LinExpr {
        let mut e = LinExpr::constant(0.0);
        e.axpy(k, self);
        e
    }

    /// Merges repeated variables and drops zero coefficients.
    pub fn normalized(&self) -> LinExpr {
        let mut acc: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        let mut pos: HashMap<usize, usize> = HashMap::new();
        for &(j, a) in &self.terms {
            match pos.get(&j) {
                Some(&k) => acc[k].1 += a,
                None => {
                    pos.insert(j, acc.len());
                    acc.push((j, a));
                }
            }
        }
        acc.retain(|&(_, a)| a != 0.0);
        LinExpr {
            terms: acc,
            constant: self.constant,
        }
    }

    /// Interval of the expression over the variable box.
    pub fn interval(&self, lower: &[f64], upper: &[f64]) -> (f64, f64) {
        let (mut lo, mut hi) = (self.constant, self.constant);
        for &(j, a) in &self.terms {
            if a > 0.0 {
                lo += a * lower[j];
                hi += a * upper[j];
            } else {
                lo += a * upper[j];
                hi += a * lower[j];
            }
        }
        (lo, hi)
    }
}

/// How to recompute a variable from earlier ones when completing a point.
#[derive(Clone, Debug)]
pub enum Op {
    /// Supplied by the caller before replay.
    External(usize),
    Affine {
        var: usize,
        expr: LinExpr,
    },
    Relu {
        x: usize,
        delta: Option<usize>,
        y: LinExpr,
    },
    MaxOf {
        z: usize,
        choice: Vec<(usize, usize)>,
        exprs: Vec<LinExpr>,
    },
    /// Shift `delta` such that `sum(clamp(base_i + delta, lo_i, hi_i)) = total`.
    UniformShift {
        delta: usize,
        base: Vec<LinExpr>,
        lo: Vec<f64>,
        hi: Vec<f64>,
        total: LinExpr,
    },
    /// `z = a * b` with `a` binary.
    Product {
        z: usize,
        a: usize,
        b: LinExpr,
    },
}

#[derive(Clone, Debug)]
pub struct EncodingContext {
    pub lp: LinearProgram,
    pub binaries: Vec<usize>,
    pub names: Vec<String>,
    index: HashMap<String, usize>,
    pub ops: Vec<Op>,
    /// Replace stably active or inactive ReLUs by affine pieces.
    pub eliminate_stable: bool,
    pub eliminated_binaries: usize,
    pub eliminated_rows: usize,
}

impl EncodingContext {
    pub fn new(sense: Sense) -> Self {
        EncodingContext {
            lp: LinearProgram::new(sense),
            binaries: Vec::new(),
            names: Vec::new(),
            index: HashMap::new(),
            ops: Vec::new(),
            eliminate_stable: true,
            eliminated_binaries: 0,
            eliminated_rows: 0,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.lp.num_vars()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lo: f64, hi: f64) -> usize {
        let name = name.into();
        let j = self.lp.add_var(lo, hi, 0.0);
        let key = if self.index.contains_key(&name) {
            format!("{name}#{j}")
        } else {
            name
        };
        self.index.insert(key.clone(), j);
        self.names.push(key);
        j
    }

    pub fn add_binary(&mut self, name: impl Into<String>) -> usize {
        let j = self.add_var(name, 0.0, 1.0);
        self.binaries.push(j);
        j
    }

    /// Variable whose value the caller fills in before [`Self::replay`].
    pub fn add_external(&mut self, name: impl Into<String>, lo: f64, hi: f64) -> usize {
        let j = self.add_var(name, lo, hi);
        self.ops.push(Op::External(j));
        j
    }

    pub fn add_external_binary(&mut self, name: impl Into<String>) -> usize {
        let j = self.add_binary(name);
        self.ops.push(Op::External(j));
        j
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn bounds_of(&self, e: &LinExpr) -> (f64, f64) {
        e.interval(&self.lp.lower, &self.lp.upper)
    }

    /// Adds `lhs relation rhs` with both sides linear expressions.
    pub fn constrain(&mut self, lhs: &LinExpr, relation: Relation, rhs: &LinExpr) {
        let mut e = lhs.clone();
        e.axpy(-1.0, rhs);
        let e = e.normalized();
        self.lp.add_constraint(e.terms, relation, -e.constant);
    }

    pub fn set_objective(&mut self, e: &LinExpr) {
        self.lp.objective = vec![0.0; self.num_vars()];
        for &(j, a) in &e.normalized().terms {
            self.lp.objective[j] += a;
        }
    }

    /// New variable equal to `expr`, bounded by its interval.
    pub fn define(&mut self, name: impl Into<String>, expr: &LinExpr) -> usize {
        let (lo, hi) = self.bounds_of(expr);
        let v = self.add_var(name, lo, hi);
        self.constrain(&LinExpr::var(v), Relation::Eq, expr);
        self.ops.push(Op::Affine {
            var: v,
            expr: expr.clone(),
        });
        v
    }

    /// Fills every derived variable of `x` from inputs and externals already
    /// present in it, following the order of construction.
    pub fn replay(&self, x: &mut [f64]) -> Result<()> {
        if x.len() != self.num_vars() {
            return Err(Error::DimensionMismatch(format!(
                "assignment has {} entries, model has {} variables",
                x.len(),
                self.num_vars()
            )));
        }
        for op in &self.ops {
            match op {
                Op::External(_) => {}
                Op::Affine { var, expr } => x[*var] = expr.value(x),
                Op::Relu { x: out, delta, y } => {
                    let v = y.value(x);
                    x[*out] = v.max(0.0);
                    if let Some(d) = delta {
                        x[*d] = if v > 0.0 { 1.0 } else { 0.0 };
                    }
                }
                Op::MaxOf { z, choice, exprs } => {
                    let vals: Vec<f64> = exprs.iter().map(|e| e.value(x)).collect();
                    let mut best = 0;
                    for (k, v) in vals.iter().enumerate() {
                        if *v > vals[best] {
                            best = k;
                        }
                    }
                    x[*z] = vals[best];
                    for &(k, s) in choice {
                        x[s] = if k == best { 1.0 } else { 0.0 };
                    }
                }
                Op::UniformShift {
                    delta,
                    base,
                    lo,
                    hi,
                    total,
                } => {
                    let b: Vec<f64> = base.iter().map(|e| e.value(x)).collect();
                    let d = total.value(x);
                    x[*delta] = exact_shift(&b, lo, hi, d)?;
                }
                Op::Product { z, a, b } => x[*z] = if x[*a] > 0.5 { b.value(x) } else { 0.0 },
            }
        }
        Ok(())
    }

    pub fn into_problem(self) -> MilpProblem {
        MilpProblem::new(self.lp, self.binaries)
    }
}

/// Uniform shift solving `sum(clamp(b + delta)) = d`, refined so the sum is
/// exact on the unsaturated set found by bisection.
pub fn exact_shift(b: &[f64], lo: &[f64], hi: &[f64], d: f64) -> Result<f64> {
    let smin: f64 = lo.iter().sum();
    let smax: f64 = hi.iter().sum();
    if d < smin - 1e-9 || d > smax + 1e-9 {
        return Err(Error::ProjectionInfeasible {
            demand: d,
            min: smin,
            max: smax,
        });
    }
    let f = |t: f64| -> f64 { (0..b.len()).map(|i| (b[i] + t).clamp(lo[i], hi[i])).sum() };
    let span = (0..b.len()).map(|i| hi[i] - lo[i]).fold(0.0, f64::max);
    let reach = (0..b.len())
        .map(|i| (hi[i] - b[i]).abs().max((b[i] - lo[i]).abs()))
        .fold(0.0, f64::max);
    let (mut a, mut c) = (-(span.max(reach)) - 1.0, span.max(reach) + 1.0);
    for _ in 0..200 {
        let m = 0.5 * (a + c);
        if f(m) < d {
            a = m;
        } else {
            c = m;
        }
        if c - a < 1e-13 {
            break;
        }
    }
    let t = 0.5 * (a + c);
    let (mut fixed, mut free_sum, mut free) = (0.0, 0.0, 0usize);
    for i in 0..b.len() {
        let v = b[i] + t;
        if v <= lo[i] {
            fixed += lo[i];
        } else if v >= hi[i] {
            fixed += hi[i];
        } else {
            free_sum += b[i];
            free += 1;
        }
    }
    if free == 0 {
        return Ok(t);
    }
    let refined = (d - fixed - free_sum) / free as f64;
    Ok(if (refined - t).abs() < 1e-9 { refined } else { t })
}

/// `x = max(y, 0)` with big-M constants from `[l, u]`.
pub fn encode_relu(ctx: &mut EncodingContext, name: &str, y: &LinExpr, l: f64, u: f64) -> Result<usize> {
    if !l.is_finite() || !u.is_finite() {
        return Err(Error::InfiniteBound(name.to_string()));
    }
    if l > u {
        return Err(Error::Precondition(format!("{name}: lower bound {l} above upper {u}")));
    }
    let x = ctx.add_var(format!("{name}.x"), l.max(0.0), u.max(0.0));
    let xe = LinExpr::var(x);
    if ctx.eliminate_stable && u <= 0.0 {
        ctx.ops.push(Op::Relu {
            x,
            delta: None,
            y: y.clone(),
        });
        ctx.eliminated_binaries += 1;
        ctx.eliminated_rows += 3;
        return Ok(x);
    }
    if ctx.eliminate_stable && l >= 0.0 {
        ctx.constrain(&xe, Relation::Eq, y);
        ctx.ops.push(Op::Relu {
            x,
            delta: None,
            y: y.clone(),
        });
        ctx.eliminated_binaries += 1;
        ctx.eliminated_rows += 2;
        return Ok(x);
    }
    let d = ctx.add_binary(format!("{name}.delta"));
    ctx.constrain(&xe, Relation::Ge, y);
    let mut ud = LinExpr::constant(0.0);
    ud.add_term(d, u);
    ctx.constrain(&xe, Relation::Le, &ud);
    // x <= y - l (1 - delta)
    let mut rhs = y.clone();
    rhs.constant -= l;
    rhs.add_term(d, l);
    ctx.constrain(&xe, Relation::Le, &rhs);
    ctx.ops.push(Op::Relu {
        x,
        delta: Some(d),
        y: y.clone(),
    });
    Ok(x)
}

/// `x = min(max(y, lo), hi)` as `hi - ReLU(hi - lo - ReLU(y - lo))`, with `y`
/// known to lie in `y_bounds`.
pub fn encode_clamp(
    ctx: &mut EncodingContext,
    name: &str,
    y: &LinExpr,
    lo: f64,
    hi: f64,
    y_bounds: (f64, f64),
) -> Result<usize> {
    if lo > hi {
        return Err(Error::Precondition(format!(
            "{name}: clamp range [{lo}, {hi}] is empty"
        )));
    }
    let (yl, yu) = y_bounds;
    let mut inner = y.clone();
    inner.constant -= lo;
    let r1 = encode_relu(ctx, &format!("{name}.lo"), &inner, yl - lo, yu - lo)?;
    let mut outer = LinExpr::constant(hi - lo);
    outer.add_term(r1, -1.0);
    let w = hi - lo;
    let r2 = encode_relu(
        ctx,
        &format!("{name}.hi"),
        &outer,
        w - (yu - lo).max(0.0),
        w - (yl - lo).max(0.0),
    )?;
    let mut out = LinExpr::constant(hi);
    out.add_term(r2, -1.0);
    Ok(ctx.define(format!("{name}.clamp"), &out))
}

/// `z = max_j exprs[j]` with one-hot selectors. Expressions whose upper bound
/// falls below another's lower bound can never attain the max and are dropped.
pub fn encode_max_of(ctx: &mut EncodingContext, name: &str, exprs: &[LinExpr], bounds: &[(f64, f64)]) -> Result<usize> {
    if exprs.is_empty() || exprs.len() != bounds.len() {
        return Err(Error::DimensionMismatch(format!(
            "{name}: {} expressions, {} bounds",
            exprs.len(),
            bounds.len()
        )));
    }
    if bounds.iter().any(|(l, u)| !l.is_finite() || !u.is_finite()) {
        return Err(Error::InfiniteBound(name.to_string()));
    }
    let l_max = bounds.iter().map(|b| b.0).fold(f64::NEG_INFINITY, f64::max);
    let u_max = bounds.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..exprs.len()).filter(|&j| bounds[j].1 >= l_max).collect();
    let z = ctx.add_var(format!("{name}.max"), l_max, u_max);
    let ze = LinExpr::var(z);
    if keep.len() == 1 {
        let e = &exprs[keep[0]];
        ctx.constrain(&ze, Relation::Eq, e);
        ctx.ops.push(Op::Affine {
            var: z,
            expr: e.clone(),
        });
        return Ok(z);
    }
    let mut onehot = LinExpr::constant(0.0);
    let mut choice = Vec::with_capacity(keep.len());
    for (k, &j) in keep.iter().enumerate() {
        let s = ctx.add_binary(format!("{name}.sel{j}"));
        onehot.add_term(s, 1.0);
        choice.push((k, s));
        ctx.constrain(&ze, Relation::Ge, &exprs[j]);
        let m = u_max - bounds[j].0;
        let mut rhs = exprs[j].clone();
        rhs.constant += m;
        rhs.add_term(s, -m);
        ctx.constrain(&ze, Relation::Le, &rhs);
    }
    ctx.constrain(&onehot, Relation::Eq, &LinExpr::constant(1.0));
    ctx.ops.push(Op::MaxOf {
        z,
        choice,
        exprs: keep.iter().map(|&j| exprs[j].clone()).collect(),
    });
    Ok(z)
}

/// `z = a * b` for binary `a` and `b` within `b_bounds` (exact McCormick).
pub fn encode_binary_product(
    ctx: &mut EncodingContext,
    name: &str,
    a: usize,
    b: &LinExpr,
    b_bounds: (f64, f64),
) -> Result<usize> {
    let (bl, bu) = b_bounds;
    if !bl.is_finite() || !bu.is_finite() {
        return Err(Error::InfiniteBound(name.to_string()));
    }
    let z = ctx.add_var(format!("{name}.prod"), bl.min(0.0), bu.max(0.0));
    let ze = LinExpr::var(z);
    let mut a_u = LinExpr::constant(0.0);
    a_u.add_term(a, bu);
    let mut a_l = LinExpr::constant(0.0);
    a_l.add_term(a, bl);
    ctx.constrain(&ze, Relation::Le, &a_u);
    ctx.constrain(&ze, Relation::Ge, &a_l);
    // z - b within [bl (1 - a), bu (1 - a)]
    let mut lo = b.clone();
    lo.constant -= bu;
    lo.add_term(a, bu);
    let mut hi = b.clone();
    hi.constant -= bl;
    hi.add_term(a, bl);
    ctx.constrain(&ze, Relation::Ge, &lo);
    ctx.constrain(&ze, Relation::Le, &hi);
    ctx.ops.push(Op::Product { z, a, b: b.clone() });
    Ok(z)
}

/// Affine map from latent coordinates to the network input: `x = m z + c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputMap {
    pub m: Vec<Vec<f64>>,
    pub c: Vec<f64>,
}

impl InputMap {
    pub fn identity(n: usize) -> Self {
        InputMap {
            m: (0..n)
                .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            c: vec![0.0; n],
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.m.first().map_or(0, |r| r.len())
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.m
            .iter()
            .zip(&self.c)
            .map(|(row, c)| c + row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    pub fn exprs(&self, latent_vars: &[usize]) -> Vec<LinExpr> {
        self.m
            .iter()
            .zip(&self.c)
            .map(|(row, &c)| {
                let mut e = LinExpr::constant(c);
                for (k, &a) in row.iter().enumerate() {
                    e.add_term(latent_vars[k], a);
                }
                e
            })
            .collect()
    }
}

fn interval_affine(w: &[f64], rows: usize, cols: usize, b: &[f64], lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut l = b.to_vec();
    let mut u = b.to_vec();
    for r in 0..rows {
        for c in 0..cols {
            let a = w[r * cols + c];
            if a >= 0.0 {
                l[r] += a * lo[c];
                u[r] += a * hi[c];
            } else {
                l[r] += a * hi[c];
                u[r] += a * lo[c];
            }
        }
    }
    (l, u)
}

fn post_activation(act: Activation, l: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match act {
        Activation::Relu => (
            l.iter().map(|v| v.max(0.0)).collect(),
            u.iter().map(|v| v.max(0.0)).collect(),
        ),
        Activation::Identity => (l.to_vec(), u.to_vec()),
    }
}

/// Interval bounds of the first layer, composed with the input map.
fn first_layer_ibp(net: &MlpNetwork, map: &InputMap, lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let l0 = &net.layers[0];
    let k = map.latent_dim();
    let mut wm = vec![0.0; l0.rows * k];
    let mut bc = l0.b.clone();
    for r in 0..l0.rows {
        for c in 0..l0.cols {
            let a = l0.weight(r, c);
            bc[r] += a * map.c[c];
            for j in 0..k {
                wm[r * k + j] += a * map.m[c][j];
            }
        }
    }
    interval_affine(&wm, l0.rows, k, &bc, lo, hi)
}

fn check_box(net: &MlpNetwork, map: &InputMap, lo: &[f64], hi: &[f64]) -> Result<()> {
    net.validate()?;
    if map.m.len() != net.input_dim() || map.c.len() != net.input_dim() {
        return Err(Error::DimensionMismatch(
            "input map does not match network input".into(),
        ));
    }
    if lo.len() != map.latent_dim() || hi.len() != map.latent_dim() {
        return Err(Error::DimensionMismatch("latent box does not match input map".into()));
    }
    if lo.iter().chain(hi).any(|v| !v.is_finite()) || lo.iter().zip(hi).any(|(a, b)| a > b) {
        return Err(Error::Precondition("latent box must be finite and nonempty".into()));
    }
    Ok(())
}

/// Interval bound propagation over a box in network-input coordinates.
pub fn ibp(net: &MlpNetwork, lo: &[f64], hi: &[f64]) -> Result<LayerBounds> {
    ibp_mapped(net, &InputMap::identity(net.input_dim()), lo, hi)
}

/// Interval bound propagation for inputs `m z + c` with `z` in `[lo, hi]`.
pub fn ibp_mapped(net: &MlpNetwork, map: &InputMap, lo: &[f64], hi: &[f64]) -> Result<LayerBounds> {
    check_box(net, map, lo, hi)?;
    let (mut l, mut u) = first_layer_ibp(net, map, lo, hi);
    let mut out = LayerBounds {
        lower: Vec::new(),
        upper: Vec::new(),
    };
    for (i, layer) in net.layers.iter().enumerate() {
        if i > 0 {
            let (pl, pu) = post_activation(net.layers[i - 1].act, &out.lower[i - 1], &out.upper[i - 1]);
            (l, u) = interval_affine(&layer.w, layer.rows, layer.cols, &layer.b, &pl, &pu);
        }
        out.lower.push(l.clone());
        out.upper.push(u.clone());
    }
    Ok(out)
}

/// Encodes `net` applied to `inputs`, using `bounds` for every big-M. Returns
/// the output variables (one per output neuron).
pub fn encode_network(
    ctx: &mut EncodingContext,
    name: &str,
    net: &MlpNetwork,
    inputs: &[LinExpr],
    bounds: &LayerBounds,
) -> Result<Vec<usize>> {
    encode_layers(ctx, name, net, inputs, bounds, net.layers.len()).map(|(_, outs)| outs)
}

/// Encodes the first `depth` layers. Returns the pre-activation expressions
/// of layer `depth` (if it exists) and the last encoded layer's variables.
fn encode_layers(
    ctx: &mut EncodingContext,
    name: &str,
    net: &MlpNetwork,
    inputs: &[LinExpr],
    bounds: &LayerBounds,
    depth: usize,
) -> Result<(Vec<LinExpr>, Vec<usize>)> {
    if inputs.len() != net.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "{name}: {} input expressions for a {}-input network",
            inputs.len(),
            net.input_dim()
        )));
    }
    let mut prev: Vec<LinExpr> = inputs.to_vec();
    let mut vars = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        let pre: Vec<LinExpr> = (0..layer.rows)
            .map(|r| {
                let mut e = LinExpr::constant(layer.b[r]);
                for (c, p) in prev.iter().enumerate() {
                    e.axpy(layer.weight(r, c), p);
                }
                e.normalized()
            })
            .collect();
        if i == depth {
            return Ok((pre, vars));
        }
        vars = Vec::with_capacity(layer.rows);
        for (r, y) in pre.iter().enumerate() {
            let label = format!("{name}.L{i}.n{r}");
            let v = match layer.act {
                Activation::Relu => encode_relu(ctx, &label, y, bounds.lower[i][r], bounds.upper[i][r])?,
                Activation::Identity => ctx.define(label, y),
            };
            vars.push(v);
        }
        prev = vars.iter().map(|&v| LinExpr::var(v)).collect();
    }
    Ok((Vec::new(), vars))
}

/// Optimization-based bound tightening, layer by layer. Each neuron's
/// pre-activation is minimized and maximized over the encoding of the layers
/// before it, either as an LP relaxation (`relax = true`) or exactly. Results
/// are padded outward by [`OBBT_PAD`] and intersected with interval bounds.
pub fn obbt(net: &MlpNetwork, map: &InputMap, lo: &[f64], hi: &[f64], relax: bool) -> Result<LayerBounds> {
    let start = ibp_mapped(net, map, lo, hi)?;
    let mut bounds = start.clone();
    for t in 0..net.layers.len() {
        if t > 0 {
            // interval pass from the tightened previous layer
            let layer = &net.layers[t];
            let (pl, pu) = post_activation(net.layers[t - 1].act, &bounds.lower[t - 1], &bounds.upper[t - 1]);
            let (l, u) = interval_affine(&layer.w, layer.rows, layer.cols, &layer.b, &pl, &pu);
            for r in 0..layer.rows {
                bounds.lower[t][r] = bounds.lower[t][r].max(l[r]);
                bounds.upper[t][r] = bounds.upper[t][r].min(u[r]);
            }
        }
        let mut ctx = EncodingContext::new(Sense::Minimize);
        let latent: Vec<usize> = (0..lo.len())
            .map(|k| ctx.add_var(format!("z{k}"), lo[k], hi[k]))
            .collect();
        let inputs = map.exprs(&latent);
        let (pre, _) = encode_layers(&mut ctx, "net", net, &inputs, &bounds, t)?;
        let results: Vec<Result<(f64, f64)>> = pre
            .par_iter()
            .map(|y| {
                let lo_v = optimize_expr(&ctx, y, Sense::Minimize, relax)?;
                let hi_v = optimize_expr(&ctx, y, Sense::Maximize, relax)?;
                Ok((lo_v, hi_v))
            })
            .collect();
        for (r, res) in results.into_iter().enumerate() {
            let (l, u) = res?;
            bounds.lower[t][r] = bounds.lower[t][r].max(l - OBBT_PAD);
            bounds.upper[t][r] = bounds.upper[t][r].min(u + OBBT_PAD);
            if bounds.lower[t][r] > bounds.upper[t][r] {
                // only possible through round-off on a fixed neuron
                let m = 0.5 * (bounds.lower[t][r] + bounds.upper[t][r]);
                bounds.lower[t][r] = m;
                bounds.upper[t][r] = m;
            }
        }
    }
    Ok(bounds)
}

/// Valid bound (not just the incumbent) on `expr` over the context's model.
fn optimize_expr(ctx: &EncodingContext, expr: &LinExpr, sense: Sense, relax: bool) -> Result<f64> {
    let mut lp = ctx.lp.clone();
    lp.sense = sense;
    lp.objective = vec![0.0; lp.num_vars()];
    for &(j, a) in &expr.terms {
        lp.objective[j] += a;
    }
    if relax || ctx.binaries.is_empty() {
        let sol = solve_lp(&lp, None)?;
        return match sol.status {
            LpStatus::Optimal => Ok(sol.objective + expr.constant),
            s => Err(Error::NumericalFailure(format!("bound subproblem returned {s:?}"))),
        };
    }
    let limits = Limits {
        gap_rel: 1e-10,
        ..Limits::default()
    };
    let res = solve_milp(&MilpProblem::new(lp, ctx.binaries.clone()), limits, 0)?;
    match res.status {
        MilpStatus::Infeasible => Err(Error::NumericalFailure("bound subproblem infeasible".into())),
        _ => Ok(res.best_bound + expr.constant),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fix(ctx: &mut EncodingContext, j: usize, v: f64) {
        ctx.lp.lower[j] = v;
        ctx.lp.upper[j] = v;
    }

    #[test]
    fn relu_active_point() {
        let mut ctx = EncodingContext::new(Sense::Maximize);
        let y = ctx.add_var("y", -1.0, 1.0);
        let x = encode_relu(&mut ctx, "r", &LinExpr::var(y), -1.0, 1.0).unwrap();
        fix(&mut ctx, y, 0.5);
        let d = ctx.lookup("r.delta").unwrap();
        for sense in [Sense::Maximize, Sense::Minimize] {
            ctx.lp.sense = sense;
            ctx.set_objective(&LinExpr::var(x));
            let res = solve_milp(&ctx.clone().into_problem(), Limits::default(), 0).unwrap();
            let sol = res.x.unwrap();
            assert!((sol[x] - 0.5).abs() < 1e-9);
            assert_eq!(sol[d], 1.0);
        }
    }

    #[test]
    fn stably_inactive_relu_has_no_binary() {
        let mut ctx = EncodingContext::new(Sense::Maximize);
        let y = ctx.add_var("y", -1.0, -0.2);
        let x = encode_relu(&mut ctx, "r", &LinExpr::var(y), -1.0, -0.2).unwrap();
        assert!(ctx.binaries.is_empty());
        assert_eq!((ctx.lp.lower[x], ctx.lp.upper[x]), (0.0, 0.0));
    }

    #[test]
    fn max_of_examples() {
        for (vals, want) in [([-1.0, -2.0, 0.0], 0.0), ([0.4, -2.4, 0.0], 0.4)] {
            let mut ctx = EncodingContext::new(Sense::Maximize);
            let vars: Vec<usize> = (0..3).map(|k| ctx.add_var(format!("e{k}"), -3.0, 3.0)).collect();
            let exprs: Vec<LinExpr> = vars.iter().map(|&v| LinExpr::var(v)).collect();
            let z = encode_max_of(&mut ctx, "m", &exprs, &[(-3.0, 3.0); 3]).unwrap();
            for (k, &v) in vars.iter().enumerate() {
                fix(&mut ctx, v, vals[k]);
            }
            for sense in [Sense::Maximize, Sense::Minimize] {
                ctx.lp.sense = sense;
                ctx.set_objective(&LinExpr::var(z));
                let res = solve_milp(&ctx.clone().into_problem(), Limits::default(), 0).unwrap();
                assert!((res.objective.unwrap() - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn clamp_examples() {
        for (yv, want) in [(1.5, 1.0), (0.3, 0.3), (-0.5, 0.0)] {
            let mut ctx = EncodingContext::new(Sense::Maximize);
            let y = ctx.add_var("y", -2.0, 2.0);
            let x = encode_clamp(&mut ctx, "c", &LinExpr::var(y), 0.0, 1.0, (-2.0, 2.0)).unwrap();
            fix(&mut ctx, y, yv);
            for sense in [Sense::Maximize, Sense::Minimize] {
                ctx.lp.sense = sense;
                ctx.set_objective(&LinExpr::var(x));
                let res = solve_milp(&ctx.clone().into_problem(), Limits::default(), 0).unwrap();
                assert!((res.objective.unwrap() - want).abs() < 1e-9, "y={yv}");
            }
        }
    }

    #[test]
    fn ibp_examples() {
        let id = MlpNetwork::identity(2);
        let b = ibp(&id, &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(b.lower[0], vec![-1.0, -1.0]);
        assert_eq!(b.upper[0], vec![1.0, 1.0]);
        let sum = MlpNetwork {
            layers: vec![crate::neural::Layer {
                rows: 1,
                cols: 2,
                w: vec![1.0, 1.0],
                b: vec![0.0],
                act: Activation::Identity,
            }],
        };
        let b = ibp(&sum, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!((b.lower[0][0], b.upper[0][0]), (0.0, 2.0));
    }

    #[test]
    fn obbt_on_identity_is_the_box() {
        let id = MlpNetwork::identity(2);
        let map = InputMap::identity(2);
        let b = obbt(&id, &map, &[-1.0, 0.0], &[1.0, 2.0], true).unwrap();
        assert_eq!(b, ibp(&id, &[-1.0, 0.0], &[1.0, 2.0]).unwrap());
    }

    #[test]
    fn exact_shift_example() {
        let d = exact_shift(&[0.2, 0.8], &[0.0, 0.0], &[1.0, 1.0], 1.5).unwrap();
        assert!((d - 0.3).abs() < 1e-12);
        assert!(exact_shift(&[0.2, 0.8], &[0.0, 0.0], &[1.0, 1.0], 2.5).is_err());
    }
}
