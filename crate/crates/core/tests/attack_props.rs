use optverify::attack::*;
use optverify::dcopf::*;
use optverify::encodings::obbt;
use optverify::lp::{solve_lp, LinearProgram, Relation, Sense};
use optverify::milp::{solve_milp, Limits};
use optverify::neural::{Activation, Layer, MlpNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk_net(case: &DcopfCase, seed: u64) -> MlpNetwork {
    MlpNetwork::random(&[case.buses, 8, 8, case.buses], seed).unwrap()
}

fn grid_max(case: &DcopfCase, net: &MlpNetwork, domain: &LoadDomain, n: usize) -> f64 {
    let (lo, hi) = (domain.lower(), domain.upper());
    let dim = lo.len();
    let mut best = f64::NEG_INFINITY;
    for idx in 0..(n + 1).pow(dim as u32) {
        let z: Vec<f64> = (0..dim)
            .map(|k| {
                let t = (idx / (n + 1).pow(k as u32)) % (n + 1);
                lo[k] + (hi[k] - lo[k]) * t as f64 / n as f64
            })
            .collect();
        best = best.max(dcopf_gap(case, net, domain, &z).unwrap());
    }
    best
}

#[test]
fn linear_value_function_is_exact() {
    // min c.y s.t. y >= x: Phi(x) = c.x
    let c = [2.0, 3.0, 0.5];
    let phi = |x: &[f64]| -> (f64, Vec<f64>) {
        let mut lp = LinearProgram::new(Sense::Minimize);
        let ys: Vec<usize> = c.iter().map(|&ci| lp.add_var(-100.0, 100.0, ci)).collect();
        for (i, &y) in ys.iter().enumerate() {
            lp.add_constraint(vec![(y, 1.0)], Relation::Ge, x[i]);
        }
        let s = solve_lp(&lp, None).unwrap();
        (s.objective, s.duals)
    };
    let x0 = [1.0, -2.0, 0.3];
    let (v0, g0) = phi(&x0);
    let vfa = build_vfa(&[(x0.to_vec(), v0, g0)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
        assert!((vfa.eval(&x).0 - phi(&x).0).abs() < 1e-9);
    }
}

#[test]
fn cuts_underestimate_value_function() {
    let case = DcopfCase::three_bus();
    let domain = LoadDomain::new(&case, 0.2);
    let vfa = sample_vfa(&case, &domain, 200, 3).unwrap();
    for (k, cut) in vfa.cuts.iter().enumerate() {
        let (v, _) = vfa.eval(&cut.anchor);
        assert!(v >= cut.value - 1e-9);
        assert!((vfa.cut_value(k, &cut.anchor) - cut.value).abs() <= 1e-9);
        assert!(v <= cut.value + 1e-6);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (lo, hi) = (domain.lower(), domain.upper());
    for _ in 0..1000 {
        let z: Vec<f64> = (0..lo.len()).map(|k| rng.gen_range(lo[k]..=hi[k])).collect();
        let phi = solve_opf(&case, &domain.load(&z)).unwrap().objective;
        assert!(vfa.eval(&z).0 <= phi + 1e-6);
    }
    // cuts from generated instances agree with the sampled ones in kind
    let set = generate_instances(&case, 50, 2).unwrap();
    let vfa2 = vfa_from_instances(&domain, &set).unwrap();
    for inst in &set.instances {
        let mut z = vec![inst.gamma];
        z.extend_from_slice(&inst.eta);
        assert!((vfa2.eval(&z).0 - inst.phi).abs() < 1e-6);
    }
}

#[test]
fn flat_surrogate_keeps_the_start() {
    let case = DcopfCase::one_bus();
    let net = MlpNetwork {
        layers: vec![Layer {
            rows: 1,
            cols: 1,
            w: vec![0.0],
            b: vec![4.0],
            act: Activation::Identity,
        }],
    };
    let domain = LoadDomain::new(&case, 0.1);
    let vfa = sample_vfa(&case, &domain, 5, 0).unwrap();
    let start = vec![1.03, 0.01];
    let r = pga_from(&case, &net, &domain, &vfa, &AttackConfig::default(), &start).unwrap();
    assert_eq!(r.latent, start);
    assert!(r.true_gap.abs() < 1e-9);
}

fn check_schedule(r: &AttackResult, cfg: &AttackConfig) {
    let t = &r.trace;
    assert!(t.len() - 1 <= cfg.max_iters);
    let mut stale = 0;
    let mut step = cfg.step0;
    for pair in t.windows(2) {
        assert!(pair[1].best_true_gap >= pair[0].best_true_gap);
    }
    for e in &t[1..] {
        assert_eq!(e.step, step, "iteration {}", e.iteration);
        if e.true_gap.is_some() {
            stale = 0;
        } else {
            stale += 1;
            if stale == cfg.patience {
                step /= cfg.decay;
            }
        }
    }
    let stopped_early = t.len() - 1 < cfg.max_iters;
    assert_eq!(stopped_early, stale == cfg.stop_after, "stale {stale}, len {}", t.len());
}

#[test]
fn attack_is_sound_strong_and_reproducible() {
    let case = DcopfCase::two_bus();
    let net = desk_net(&case, 3);
    let domain = LoadDomain::new(&case, 0.05);
    let vfa = sample_vfa(&case, &domain, 200, 1).unwrap();
    let cfg = AttackConfig {
        starts: 8,
        partitions: 4,
        workers: 4,
        ..AttackConfig::default()
    };
    let r = attack(&case, &net, &domain, &vfa, &cfg, 11).unwrap();
    check_schedule(&r, &cfg);
    assert_eq!(r.runs, 32);

    let bounds = obbt(&net, &domain.input_map(), &domain.lower(), &domain.upper(), true).unwrap();
    let m = build_compact_milp(&case, &net, &domain, &bounds).unwrap();
    let opt = solve_milp(&m.problem(), Limits::default(), 0)
        .unwrap()
        .objective
        .unwrap();
    assert!(r.true_gap <= opt + 1e-5);
    let grid = grid_max(&case, &net, &domain, 30);
    assert!(r.true_gap >= 0.95 * grid, "attack {} vs grid {grid}", r.true_gap);

    let again = attack(&case, &net, &domain, &vfa, &AttackConfig { workers: 1, ..cfg }, 11).unwrap();
    assert_eq!(again.latent, r.latent);
    assert_eq!(again.trace, r.trace);
    let json = r.to_json().unwrap();
    assert!(json.contains("trace") && json.contains("true_gap"));
}

#[test]
fn partitioning_never_hurts() {
    for (case, u) in [(DcopfCase::two_bus(), 0.05), (DcopfCase::three_bus(), 0.1)] {
        let net = desk_net(&case, 7);
        let domain = LoadDomain::new(&case, u);
        let vfa = sample_vfa(&case, &domain, 100, 2).unwrap();
        let single = AttackConfig {
            starts: 4,
            ..AttackConfig::default()
        };
        let whole = attack(&case, &net, &domain, &vfa, &single, 5).unwrap();
        let split = attack(
            &case,
            &net,
            &domain,
            &vfa,
            &AttackConfig {
                partitions: 4,
                ..single
            },
            5,
        )
        .unwrap();
        assert!(
            split.true_gap >= whole.true_gap - 1e-9,
            "{} < {}",
            split.true_gap,
            whole.true_gap
        );
        for r in [whole, split] {
            check_schedule(&r, &single);
        }
    }
}
