use optverify::lp::{solve_lp, LinearProgram, LpStatus, Relation, Sense};
use optverify::milp::{solve_milp, Limits, MilpProblem, MilpStatus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Best objective over every binary assignment, each completed by an LP.
fn enumerate(p: &MilpProblem) -> Option<f64> {
    let sign = p.lp.sense.sign();
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << p.binaries.len()) {
        let mut lp = p.lp.clone();
        for (k, &j) in p.binaries.iter().enumerate() {
            let v = ((mask >> k) & 1) as f64;
            lp.lower[j] = v;
            lp.upper[j] = v;
        }
        let sol = solve_lp(&lp, None).unwrap();
        if sol.status == LpStatus::Optimal && best.is_none_or(|b| sign * sol.objective < sign * b) {
            best = Some(sol.objective);
        }
    }
    best
}

fn random_milp(rng: &mut ChaCha8Rng) -> MilpProblem {
    let sense = if rng.gen_bool(0.5) {
        Sense::Maximize
    } else {
        Sense::Minimize
    };
    let mut lp = LinearProgram::new(sense);
    let nb = rng.gen_range(1..=10);
    let nc = rng.gen_range(0..=8);
    let binaries: Vec<usize> = (0..nb)
        .map(|_| lp.add_var(0.0, 1.0, rng.gen_range(-5..=5) as f64))
        .collect();
    for _ in 0..nc {
        let lo = rng.gen_range(-3..=0) as f64;
        let hi = lo + rng.gen_range(0..=4) as f64;
        lp.add_var(lo, hi, rng.gen_range(-5..=5) as f64);
    }
    let n = nb + nc;
    let rows = rng.gen_range(1..=6);
    for _ in 0..rows {
        let mut terms = Vec::new();
        for j in 0..n {
            if rng.gen_bool(0.6) {
                terms.push((j, rng.gen_range(-5..=5) as f64));
            }
        }
        let rel = match rng.gen_range(0..5) {
            0 => Relation::Eq,
            1 | 2 => Relation::Ge,
            _ => Relation::Le,
        };
        lp.add_constraint(terms, rel, rng.gen_range(-5..=5) as f64);
    }
    MilpProblem::new(lp, binaries)
}

#[test]
fn random_milps_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut solved = 0;
    for case in 0..200 {
        let p = random_milp(&mut rng);
        let oracle = enumerate(&p);
        let res = solve_milp(&p, Limits::default(), 0).unwrap();
        match oracle {
            None => assert_eq!(res.status, MilpStatus::Infeasible, "case {case}"),
            Some(v) => {
                assert_eq!(res.status, MilpStatus::Optimal, "case {case}");
                let obj = res.objective.unwrap();
                assert!((obj - v).abs() <= 1e-6, "case {case}: {obj} vs {v}");
                assert!(p.infeasibility(res.x.as_ref().unwrap()) <= 1e-8, "case {case}");
                // every logged bound is valid for the final optimum
                let sign = p.lp.sense.sign();
                for e in &res.log.entries {
                    assert!(
                        sign * e.bound <= sign * v + 1e-6,
                        "case {case}: bound {} vs {v}",
                        e.bound
                    );
                }
                solved += 1;
            }
        }
    }
    assert!(solved >= 60, "only {solved} feasible cases");
}

#[test]
fn ten_item_knapsack_matches_enumeration() {
    let v = [12.0, 7.0, 9.0, 4.0, 15.0, 3.0, 8.0, 11.0, 6.0, 5.0];
    let w = [5.0, 3.0, 4.0, 2.0, 7.0, 1.0, 4.0, 6.0, 3.0, 3.0];
    let cap = 20.0;
    let mut best = 0.0f64;
    for mask in 0u32..1024 {
        let (mut tv, mut tw) = (0.0, 0.0);
        for i in 0..10 {
            if mask >> i & 1 == 1 {
                tv += v[i];
                tw += w[i];
            }
        }
        if tw <= cap {
            best = best.max(tv);
        }
    }
    let mut lp = LinearProgram::new(Sense::Maximize);
    let ys: Vec<usize> = v.iter().map(|&vi| lp.add_var(0.0, 1.0, vi)).collect();
    lp.add_constraint(ys.iter().zip(w).map(|(&j, wi)| (j, wi)).collect(), Relation::Le, cap);
    let res = solve_milp(&MilpProblem::new(lp, ys), Limits::default(), 0).unwrap();
    assert_eq!(res.status, MilpStatus::Optimal);
    assert!((res.objective.unwrap() - best).abs() < 1e-9);
}

#[test]
fn log_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let p = random_milp(&mut rng);
        let res = solve_milp(&p, Limits::default(), 0).unwrap();
        let sign = p.lp.sense.sign();
        for pair in res.log.entries.windows(2) {
            assert!(sign * pair[1].bound >= sign * pair[0].bound - 1e-12);
            if let (Some(a), Some(b)) = (pair[0].incumbent, pair[1].incumbent) {
                assert!(sign * b <= sign * a + 1e-12);
            }
        }
        let json = serde_json::to_string(&res.log).unwrap();
        assert!(json.contains("entries"));
    }
}

#[test]
fn feasible_warm_start_never_hurts() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let limits = Limits {
        node_cap: 3,
        ..Limits::default()
    };
    let mut checked = 0;
    for _ in 0..100 {
        let p = random_milp(&mut rng);
        let Some(x) = solve_milp(&p, Limits::default(), 0).unwrap().x else {
            continue;
        };
        let cold = solve_milp(&p, limits, 0).unwrap();
        let mut warm_p = p.clone();
        warm_p.warm_start = Some(x);
        let warm = solve_milp(&warm_p, limits, 0).unwrap();
        let sign = p.lp.sense.sign();
        let w = warm.objective.unwrap();
        if let Some(c) = cold.objective {
            assert!(sign * w <= sign * c + 1e-9);
        }
        checked += 1;
    }
    assert!(checked > 20);
}
