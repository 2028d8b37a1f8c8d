mod common;

use optverify::lp::{dual_objective, solve_lp, LpStatus, Relation, Sense, DUALITY_TOL, FEAS_TOL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_lps_match_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut optimal = 0;
    for case in 0..1000 {
        let lp = common::random_lp(&mut rng, 6, 6);
        let oracle = common::vertex_enumeration(&lp);
        let sol = solve_lp(&lp, None).unwrap();
        match oracle {
            None => assert_eq!(sol.status, LpStatus::Infeasible, "case {case}: {lp:?}"),
            Some((obj, _)) => {
                assert_eq!(sol.status, LpStatus::Optimal, "case {case}: {lp:?}");
                assert!(
                    (sol.objective - obj).abs() <= 1e-7,
                    "case {case}: {} vs {obj}",
                    sol.objective
                );
                assert!(lp.max_violation(&sol.x) <= FEAS_TOL);
                let dual = dual_objective(&sol, &lp);
                assert!(
                    (dual - sol.objective).abs() <= DUALITY_TOL * (1.0 + sol.objective.abs()),
                    "case {case}: dual {dual} primal {}",
                    sol.objective
                );
                optimal += 1;
            }
        }
    }
    assert!(optimal > 300, "too few feasible samples: {optimal}");
}

#[test]
fn larger_lps_match_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let lp = common::random_lp(&mut rng, 7, 7);
        let oracle = common::vertex_enumeration(&lp);
        let sol = solve_lp(&lp, None).unwrap();
        match oracle {
            None => assert_eq!(sol.status, LpStatus::Infeasible),
            Some((obj, _)) => assert!((sol.objective - obj).abs() <= 1e-7),
        }
    }
}

#[test]
fn complementary_slackness_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..300 {
        let lp = common::random_lp(&mut rng, 8, 8);
        let sol = solve_lp(&lp, None).unwrap();
        if !sol.is_optimal() {
            continue;
        }
        for (row, y) in lp.constraints.iter().zip(&sol.duals) {
            let slack = row.rhs - row.activity(&sol.x);
            assert!((y * slack).abs() <= 1e-7, "row slack {slack} dual {y}");
            let s = lp.sense.sign() * y;
            match row.relation {
                Relation::Le => assert!(s <= 1e-9),
                Relation::Ge => assert!(s >= -1e-9),
                Relation::Eq => {}
            }
        }
        for j in 0..lp.num_vars() {
            let d = sol.reduced_costs[j];
            let to_bound = (sol.x[j] - lp.lower[j]).abs().min((lp.upper[j] - sol.x[j]).abs());
            assert!((d * to_bound).abs() <= 1e-7);
        }
    }
}

#[test]
fn duals_are_subgradients_of_rhs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for _ in 0..400 {
        let mut lp = common::random_lp(&mut rng, 6, 6);
        lp.sense = Sense::Minimize;
        let base = solve_lp(&lp, None).unwrap();
        if !base.is_optimal() {
            continue;
        }
        for _ in 0..5 {
            let mut perturbed = lp.clone();
            let delta: Vec<f64> = (0..lp.num_rows()).map(|_| rng.gen_range(-0.5..0.5)).collect();
            for (row, d) in perturbed.constraints.iter_mut().zip(&delta) {
                row.rhs += d;
            }
            let sol = solve_lp(&perturbed, None).unwrap();
            if !sol.is_optimal() {
                continue;
            }
            let predicted: f64 = base.objective + base.duals.iter().zip(&delta).map(|(y, d)| y * d).sum::<f64>();
            assert!(sol.objective >= predicted - 1e-7, "{} < {predicted}", sol.objective);
            checked += 1;
        }
    }
    assert!(checked > 200);
}

#[test]
fn warm_start_reaches_same_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let lp = common::random_lp(&mut rng, 8, 8);
        let cold = solve_lp(&lp, None).unwrap();
        if !cold.is_optimal() {
            continue;
        }
        let mut tightened = lp.clone();
        let j = rng.gen_range(0..lp.num_vars());
        let mid = 0.5 * (lp.lower[j] + lp.upper[j]);
        tightened.upper[j] = mid;
        let warm = solve_lp(&tightened, cold.basis.as_ref()).unwrap();
        let fresh = solve_lp(&tightened, None).unwrap();
        assert_eq!(warm.status, fresh.status);
        if fresh.is_optimal() {
            assert!((warm.objective - fresh.objective).abs() <= 1e-7);
        }
    }
}

#[test]
fn solves_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let lp = common::random_lp(&mut rng, 8, 8);
        let a = solve_lp(&lp, None).unwrap();
        let b = solve_lp(&lp, None).unwrap();
        assert_eq!(a.status, b.status);
        assert_eq!(a.iterations, b.iterations);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.x), bits(&b.x));
        assert_eq!(bits(&a.duals), bits(&b.duals));
    }
}
