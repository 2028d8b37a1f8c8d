use optverify::encodings::{ibp_mapped, obbt, EncodingContext, LinExpr};
use optverify::knapsack::*;
use optverify::lp::Sense;
use optverify::milp::{solve_milp, Limits, MilpStatus};
use optverify::neural::{Activation, Layer, MlpNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The greedy selection characterized without simulating it: the unique
/// subset that is a prefix of the sorted order and either takes everything
/// or overflows once the next item is added.
fn prefix_oracle(s: &[f64], w: &[f64], l: f64) -> Vec<u8> {
    let k = s.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    let mut found = Vec::new();
    for mask in 0u32..(1 << k) {
        let taken = mask.count_ones() as usize;
        let is_prefix = (0..k).all(|p| (mask >> order[p] & 1 == 1) == (p < taken));
        if !is_prefix {
            continue;
        }
        let weight: f64 = (0..k).filter(|&i| mask >> i & 1 == 1).map(|i| w[i]).sum();
        if weight > l {
            continue;
        }
        if taken == k || weight + w[order[taken]] > l {
            found.push((0..k).map(|i| (mask >> i & 1) as u8).collect::<Vec<u8>>());
        }
    }
    assert_eq!(found.len(), 1);
    found.pop().unwrap()
}

fn brute_force(v: &[f64], w: &[f64], l: f64) -> f64 {
    let k = v.len();
    (0u32..(1 << k))
        .filter(|m| (0..k).filter(|&i| m >> i & 1 == 1).map(|i| w[i]).sum::<f64>() <= l)
        .map(|m| (0..k).filter(|&i| m >> i & 1 == 1).map(|i| v[i]).sum::<f64>())
        .fold(0.0, f64::max)
}

#[test]
fn greedy_matches_prefix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let k = rng.gen_range(1..=7);
        let s: Vec<f64> = (0..k).map(|_| rng.gen_range(0..5) as f64).collect();
        let w: Vec<f64> = (0..k).map(|_| rng.gen_range(1..=6) as f64).collect();
        let l = rng.gen_range(0..=20) as f64;
        let y = greedy_repair(&s, &w, l);
        assert_eq!(y, prefix_oracle(&s, &w, l));
        let used: f64 = (0..k).map(|i| w[i] * y[i] as f64).sum();
        assert!(used <= l);
    }
}

#[test]
fn exact_solvers_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let c = KnapsackCase::random(12, rng.gen());
        let (a, ya) = knapsack_enumerate(&c.v, &c.w, c.l);
        let (b, yb) = knapsack_dp(&c.v, &c.w, c.l).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert!((a - brute_force(&c.v, &c.w, c.l)).abs() < 1e-9);
        for y in [ya, yb] {
            assert!((0..12).map(|i| c.w[i] * y[i] as f64).sum::<f64>() <= c.l);
        }
    }
    let big = KnapsackCase::random(40, 9);
    let (v, _) = knapsack_exact(&big.v, &big.w, big.l).unwrap();
    assert!(v > 0.0);
}

#[test]
fn scores_match_division() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..10.0)).collect();
    let w: Vec<f64> = (0..20).map(|_| rng.gen_range(0.5..5.0)).collect();
    for (i, s) in heuristic_scores(&v, &w).iter().enumerate() {
        assert_eq!(*s, v[i] / w[i]);
    }
}

#[test]
fn repair_encoding_is_unique_and_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut trials = 0;
    while trials < 200 {
        let k = rng.gen_range(2..=6);
        let s: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..k).map(|_| rng.gen_range(1..=6) as f64).collect();
        let l = rng.gen_range(0..=18) as f64;
        let greedy = greedy_repair(&s, &w, l);
        let mut ctx = EncodingContext::new(Sense::Maximize);
        let exprs: Vec<LinExpr> = s.iter().map(|&v| LinExpr::constant(v)).collect();
        let bounds: Vec<(f64, f64)> = s.iter().map(|&v| (v, v)).collect();
        let block = encode_greedy_repair(&mut ctx, "r", &exprs, &bounds, &w, &LinExpr::constant(l)).unwrap();
        // largest Hamming distance from the greedy selection
        let mut obj = LinExpr::constant(0.0);
        for i in 0..k {
            obj.add_term(block.y_hat[i], if greedy[i] == 1 { -1.0 } else { 1.0 });
        }
        ctx.set_objective(&obj);
        let res = solve_milp(&ctx.into_problem(), Limits::default(), 0).unwrap();
        assert_eq!(res.status, MilpStatus::Optimal);
        let x = res.x.unwrap();
        let dist = res.objective.unwrap() + greedy.iter().filter(|&&g| g == 1).count() as f64;
        assert!(dist.abs() < 1e-6, "scores {s:?} w {w:?} l {l}: distance {dist}");
        for i in 0..k {
            assert!((x[block.y_hat[i]] - greedy[i] as f64).abs() < 1e-6);
            let row: f64 = (0..k).map(|p| x[block.perm[i][p]]).sum();
            let col: f64 = (0..k).map(|p| x[block.perm[p][i]]).sum();
            assert!((row - 1.0).abs() < 1e-6 && (col - 1.0).abs() < 1e-6);
        }
        trials += 1;
    }
}

/// Scores `v / w` exactly, as a single affine layer.
fn ratio_net(w: &[f64]) -> MlpNetwork {
    let k = w.len();
    let mut weights = vec![0.0; k * (k + 1)];
    for i in 0..k {
        weights[i * (k + 1) + i] = 1.0 / w[i];
    }
    MlpNetwork {
        layers: vec![Layer {
            rows: k,
            cols: k + 1,
            w: weights,
            b: vec![0.0; k],
            act: Activation::Identity,
        }],
    }
}

fn solve_compact(case: &KnapsackCase, net: &MlpNetwork, domain: &KnapsackDomain) -> (f64, Vec<f64>) {
    let bounds = obbt(net, &domain.input_map(), &domain.lower(), &domain.upper(), true).unwrap();
    let m = build_knapsack_compact_milp(case, net, domain, &bounds).unwrap();
    let mut p = m.problem();
    p.warm_start = Some(m.complete(case, net, domain, &domain.center()).unwrap());
    let res = solve_milp(&p, Limits::default(), 0).unwrap();
    assert_eq!(res.status, MilpStatus::Optimal);
    assert!(res.log.warnings.is_empty(), "{:?}", res.log.warnings);
    let x = res.x.unwrap();
    (res.objective.unwrap(), m.latent.iter().map(|&j| x[j]).collect())
}

#[test]
fn ratio_proxy_on_uniform_weights_is_optimal() {
    let case = KnapsackCase {
        k: 4,
        v: vec![5.0, 9.0, 7.0, 3.0],
        w: vec![2.0; 4],
        l: 5.0,
    };
    let net = ratio_net(&case.w);
    let domain = KnapsackDomain::new(&case, 0.1);
    let (v, _) = solve_compact(&case, &net, &domain);
    assert!(v.abs() < 1e-6, "{v}");
}

#[test]
fn compact_matches_latent_grid() {
    let case = KnapsackCase::desk();
    let mut net = MlpNetwork::random(&[6, 8, 5], 5).unwrap();
    let domain = KnapsackDomain::new(&case, 0.1);
    train_scores(&case, &mut net, &domain, 100, 50, 0.05, 1).unwrap();
    let (opt, z) = solve_compact(&case, &net, &domain);
    let at = evaluate(&case, &net, &domain, &z).unwrap();
    assert!(opt >= evaluate(&case, &net, &domain, &domain.center()).unwrap().gap - 1e-6);
    let n: usize = 4;
    let mut best = f64::NEG_INFINITY;
    for idx in 0..n.pow(6) {
        let z: Vec<f64> = (0..6)
            .map(|d| {
                let t = (idx / n.pow(d as u32)) % n;
                0.9 + 0.2 * t as f64 / (n - 1) as f64
            })
            .collect();
        let g = evaluate(&case, &net, &domain, &z).unwrap().gap;
        assert!(g >= -1e-9);
        best = best.max(g);
    }
    assert!(opt >= best - 1e-6, "MILP {opt} below grid {best}");
    assert!(
        (opt - at.gap).abs() < 1e-4,
        "MILP {opt} vs gap {} at its incumbent",
        at.gap
    );
}

#[test]
fn fixed_latent_reproduces_gap() {
    let case = KnapsackCase::desk();
    let net = MlpNetwork::random(&[6, 8, 5], 6).unwrap();
    let domain = KnapsackDomain::new(&case, 0.1);
    let bounds = ibp_mapped(&net, &domain.input_map(), &domain.lower(), &domain.upper()).unwrap();
    let m = build_knapsack_compact_milp(&case, &net, &domain, &bounds).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let z: Vec<f64> = (0..6).map(|_| rng.gen_range(0.9..1.1)).collect();
        let mut p = m.problem();
        for (k, &v) in m.latent.iter().enumerate() {
            p.lp.lower[v] = z[k];
            p.lp.upper[v] = z[k];
        }
        let x = m.complete(&case, &net, &domain, &z).unwrap();
        assert!(p.infeasibility(&x) <= 1e-6);
        let res = solve_milp(&p, Limits::default(), 0).unwrap();
        let want = evaluate(&case, &net, &domain, &z).unwrap().gap;
        assert!(
            (res.objective.unwrap() - want).abs() < 1e-6,
            "{:?} vs {want}",
            res.objective
        );
    }
}

#[test]
fn score_training_decreases_loss() {
    let case = KnapsackCase::desk();
    let mut net = MlpNetwork::random(&[6, 16, 5], 0).unwrap();
    let domain = KnapsackDomain::new(&case, 0.1);
    let hist = train_scores(&case, &mut net, &domain, 200, 200, 0.002, 3).unwrap();
    assert_eq!(hist.len(), 201);
    for pair in hist[..11].windows(2) {
        assert!(pair[1] < pair[0], "{hist:?}");
    }
    assert!(hist[200] < hist[0]);
    let untouched = MlpNetwork::random(&[6, 16, 5], 0).unwrap();
    let mut same = untouched.clone();
    train_scores(&case, &mut same, &domain, 10, 0, 0.01, 3).unwrap();
    assert_eq!(same, untouched);
}
