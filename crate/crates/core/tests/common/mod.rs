#![allow(dead_code)]

use optverify::lp::{LinearProgram, Relation, Sense};

/// Solves a dense square system by Gaussian elimination; `None` if singular.
pub fn solve_square(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap())?;
        if a[p][c].abs() < 1e-10 {
            return None;
        }
        a.swap(p, c);
        b.swap(p, c);
        for r in 0..n {
            if r != c {
                let f = a[r][c] / a[c][c];
                if f != 0.0 {
                    for k in c..n {
                        a[r][k] -= f * a[c][k];
                    }
                    b[r] -= f * b[c];
                }
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

/// Brute-force optimum over all basic solutions of a bounded LP. Returns
/// `None` when no vertex is feasible. Every variable must have finite bounds.
pub fn vertex_enumeration(lp: &LinearProgram) -> Option<(f64, Vec<f64>)> {
    let n = lp.num_vars();
    // planes: (coefficients, rhs, is_equality)
    let mut eqs: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut ineqs: Vec<(Vec<f64>, f64)> = Vec::new();
    for row in &lp.constraints {
        let mut a = vec![0.0; n];
        for &(j, v) in &row.terms {
            a[j] += v;
        }
        match row.relation {
            Relation::Eq => eqs.push((a, row.rhs)),
            _ => ineqs.push((a, row.rhs)),
        }
    }
    for j in 0..n {
        assert!(lp.lower[j].is_finite() && lp.upper[j].is_finite());
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        ineqs.push((e.clone(), lp.lower[j]));
        ineqs.push((e, lp.upper[j]));
    }
    // keep a linearly independent subset of the equalities as always-active
    // planes; the dependent ones are enforced by the feasibility check
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut fixed = Vec::new();
    for (a, rhs) in eqs {
        let mut r = a.clone();
        for q in &basis {
            let p = q.iter().position(|v| v.abs() > 1e-12).unwrap();
            let f = r[p] / q[p];
            for k in 0..n {
                r[k] -= f * q[k];
            }
        }
        if r.iter().any(|v| v.abs() > 1e-9) {
            basis.push(r);
            fixed.push((a, rhs));
        }
    }
    enumerate_with(lp, &fixed, &ineqs, n - fixed.len())
}

fn enumerate_with(
    lp: &LinearProgram,
    fixed: &[(Vec<f64>, f64)],
    pool: &[(Vec<f64>, f64)],
    k: usize,
) -> Option<(f64, Vec<f64>)> {
    let sign = lp.sense.sign();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut idx: Vec<usize> = (0..k).collect();
    if k > pool.len() {
        return None;
    }
    loop {
        let mut a: Vec<Vec<f64>> = fixed.iter().map(|p| p.0.clone()).collect();
        let mut b: Vec<f64> = fixed.iter().map(|p| p.1).collect();
        for &i in &idx {
            a.push(pool[i].0.clone());
            b.push(pool[i].1);
        }
        if let Some(x) = solve_square(a, b) {
            if lp.max_violation(&x) <= 1e-9 {
                let obj = lp.objective_value(&x);
                if best.as_ref().map_or(true, |(o, _)| sign * obj < sign * o) {
                    best = Some((obj, x));
                }
            }
        }
        // next combination
        let mut i = k;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if idx[i] < pool.len() - k + i {
                idx[i] += 1;
                for t in i + 1..k {
                    idx[t] = idx[t - 1] + 1;
                }
                break;
            }
        }
    }
}

pub fn random_lp(rng: &mut impl rand::Rng, max_vars: usize, max_rows: usize) -> LinearProgram {
    let n = rng.gen_range(1..=max_vars);
    let m = rng.gen_range(1..=max_rows);
    let sense = if rng.gen_bool(0.5) {
        Sense::Minimize
    } else {
        Sense::Maximize
    };
    let mut lp = LinearProgram::new(sense);
    for _ in 0..n {
        let lo = rng.gen_range(-5..=0) as f64;
        let hi = lo + rng.gen_range(1..=5) as f64;
        lp.add_var(lo, hi, rng.gen_range(-5..=5) as f64);
    }
    for _ in 0..m {
        let mut terms = Vec::new();
        for j in 0..n {
            if rng.gen_bool(0.7) {
                terms.push((j, rng.gen_range(-5..=5) as f64));
            }
        }
        let relation = match rng.gen_range(0..5) {
            0 => Relation::Eq,
            1 | 2 => Relation::Le,
            _ => Relation::Ge,
        };
        lp.add_constraint(terms, relation, rng.gen_range(-5..=5) as f64);
    }
    lp
}
