//! Primal heuristic for the DC-OPF verification problem: projected gradient
//! ascent on the proxy cost minus a cutting-plane model of the value
//! function, over the latent load box.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dcopf::{proxy_forward, proxy_subgradient, solve_opf, value_gradient, DcopfCase, InstanceSet, LoadDomain};
use crate::error::{Error, Result};
use crate::neural::MlpNetwork;

/// One supporting hyperplane `value + slope . (z - anchor)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cut {
    pub anchor: Vec<f64>,
    pub value: f64,
    pub slope: Vec<f64>,
}

/// Pointwise maximum of cuts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueFunctionApprox {
    pub cuts: Vec<Cut>,
}

impl ValueFunctionApprox {
    pub fn dim(&self) -> usize {
        self.cuts[0].anchor.len()
    }

    pub fn cut_value(&self, k: usize, z: &[f64]) -> f64 {
        let c = &self.cuts[k];
        c.value
            + c.slope
                .iter()
                .zip(z.iter().zip(&c.anchor))
                .map(|(s, (a, b))| s * (a - b))
                .sum::<f64>()
    }

    /// Value and the index of the maximizing cut (lowest index on ties).
    pub fn eval(&self, z: &[f64]) -> (f64, usize) {
        let mut best = (self.cut_value(0, z), 0);
        for k in 1..self.cuts.len() {
            let v = self.cut_value(k, z);
            if v > best.0 {
                best = (v, k);
            }
        }
        best
    }

    pub fn subgradient(&self, z: &[f64]) -> &[f64] {
        &self.cuts[self.eval(z).1].slope
    }
}

/// Cuts from `(anchor, value, slope)` triples.
pub fn build_vfa(instances: &[(Vec<f64>, f64, Vec<f64>)]) -> Result<ValueFunctionApprox> {
    let Some(first) = instances.first() else {
        return Err(Error::Precondition(
            "a value-function model needs at least one cut".into(),
        ));
    };
    let dim = first.0.len();
    let mut cuts = Vec::with_capacity(instances.len());
    for (k, (anchor, value, slope)) in instances.iter().enumerate() {
        if anchor.len() != dim || slope.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "cut {k} has anchor {} and slope {}, expected {dim}",
                anchor.len(),
                slope.len()
            )));
        }
        if !value.is_finite() || anchor.iter().chain(slope).any(|v| !v.is_finite()) {
            return Err(Error::Precondition(format!("cut {k} is not finite")));
        }
        cuts.push(Cut {
            anchor: anchor.clone(),
            value: *value,
            slope: slope.clone(),
        });
    }
    Ok(ValueFunctionApprox { cuts })
}

/// Cuts at solved instances, mapped to the latent coordinates of `domain`
/// (instance loads are `(gamma + eta) * d_ref`, i.e. latent `[gamma, eta]`).
pub fn vfa_from_instances(domain: &LoadDomain, set: &InstanceSet) -> Result<ValueFunctionApprox> {
    let triples: Vec<(Vec<f64>, f64, Vec<f64>)> = set
        .instances
        .iter()
        .map(|inst| {
            let mut anchor = vec![inst.gamma];
            anchor.extend_from_slice(&inst.eta);
            (anchor, inst.phi, domain.latent_gradient(&inst.gradient))
        })
        .collect();
    build_vfa(&triples)
}

/// Cuts at `n` uniform latent samples of `domain`.
pub fn sample_vfa(case: &DcopfCase, domain: &LoadDomain, n: usize, seed: u64) -> Result<ValueFunctionApprox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = (0..n).map(|_| uniform_point(domain, &mut rng)).collect();
    let triples: Vec<Result<(Vec<f64>, f64, Vec<f64>)>> = points
        .into_par_iter()
        .map(|z| {
            let sol = solve_opf(case, &domain.load(&z))?;
            let g = domain.latent_gradient(&value_gradient(case, &sol));
            Ok((z, sol.objective, g))
        })
        .collect();
    build_vfa(&triples.into_iter().collect::<Result<Vec<_>>>()?)
}

fn uniform_point(domain: &LoadDomain, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (lo, hi) = (domain.lower(), domain.upper());
    (0..lo.len())
        .map(|k| {
            if lo[k] < hi[k] {
                rng.gen_range(lo[k]..=hi[k])
            } else {
                lo[k]
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub step0: f64,
    pub decay: f64,
    /// Non-improving iterations before the step is divided by `decay`.
    pub patience: usize,
    /// Non-improving iterations before stopping.
    pub stop_after: usize,
    pub max_iters: usize,
    pub workers: usize,
    pub starts: usize,
    pub partitions: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            step0: 1e-3,
            decay: 10.0,
            patience: 10,
            stop_after: 20,
            max_iters: 500,
            workers: 1,
            starts: 1,
            partitions: 1,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.patience,
            self.stop_after,
            self.max_iters,
            self.workers,
            self.starts,
            self.partitions,
        ];
        if !(self.step0 > 0.0) || !(self.decay > 1.0) || counts.contains(&0) {
            return Err(Error::Precondition(
                "attack settings must be positive and decay > 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub step: f64,
    pub surrogate: f64,
    /// Evaluated only when the surrogate improved.
    pub true_gap: Option<f64>,
    pub best_true_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub latent: Vec<f64>,
    pub load: Vec<f64>,
    pub true_gap: f64,
    pub trace: Vec<TraceEntry>,
    /// `(partition, start)` of the winning run.
    pub origin: (usize, usize),
    pub runs: usize,
    pub wall_s: f64,
}

impl AttackResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Proxy cost minus the LP optimum at latent `z`.
pub fn dcopf_gap(case: &DcopfCase, net: &MlpNetwork, domain: &LoadDomain, z: &[f64]) -> Result<f64> {
    let d = domain.load(z);
    let proxy = proxy_forward(case, net, &d)?.cost;
    Ok(proxy - solve_opf(case, &d)?.objective)
}

/// Componentwise clamp to the latent box.
pub fn project_latent(z: &[f64], domain: &LoadDomain) -> Vec<f64> {
    let (lo, hi) = (domain.lower(), domain.upper());
    z.iter().enumerate().map(|(k, v)| v.clamp(lo[k], hi[k])).collect()
}

/// `m` starts: the center if `m = 1`, otherwise box corners (in binary
/// counting order over the coordinates) followed by uniform samples.
pub fn multi_start(domain: &LoadDomain, m: usize, seed: u64) -> Vec<Vec<f64>> {
    if m <= 1 {
        return vec![domain.center(); m];
    }
    let (lo, hi) = (domain.lower(), domain.upper());
    let dim = lo.len();
    let corners = if dim >= 63 { u64::MAX } else { 1u64 << dim };
    let mut out = Vec::with_capacity(m);
    let mut mask = 0u64;
    while (out.len() as u64) < corners.min(m as u64) {
        out.push(
            (0..dim)
                .map(|k| if mask >> k & 1 == 1 { hi[k] } else { lo[k] })
                .collect(),
        );
        mask += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while out.len() < m {
        out.push(uniform_point(domain, &mut rng));
    }
    out
}

/// `p` equal slabs of the alpha interval.
pub fn partition_domain(domain: &LoadDomain, p: usize) -> Vec<LoadDomain> {
    let p = p.max(1);
    let width = (domain.alpha_hi - domain.alpha_lo) / p as f64;
    (0..p)
        .map(|k| LoadDomain {
            alpha_lo: domain.alpha_lo + width * k as f64,
            alpha_hi: if k + 1 == p {
                domain.alpha_hi
            } else {
                domain.alpha_lo + width * (k + 1) as f64
            },
            ..domain.clone()
        })
        .collect()
}

/// One ascent run from `start`. The incumbent is ranked by true gap, which
/// is evaluated whenever the surrogate improves on its best value.
pub fn pga_from(
    case: &DcopfCase,
    net: &MlpNetwork,
    domain: &LoadDomain,
    vfa: &ValueFunctionApprox,
    cfg: &AttackConfig,
    start: &[f64],
) -> Result<AttackResult> {
    cfg.validate()?;
    if vfa.cuts.is_empty() || vfa.dim() != domain.dim() || start.len() != domain.dim() {
        return Err(Error::DimensionMismatch("start, cuts and domain disagree".into()));
    }
    let timer = Instant::now();
    let surrogate = |z: &[f64]| -> Result<f64> {
        let cost = proxy_forward(case, net, &domain.load(z))?.cost;
        Ok(cost - vfa.eval(z).0)
    };
    let mut z = project_latent(start, domain);
    let mut best_surrogate = surrogate(&z)?;
    let mut best = (dcopf_gap(case, net, domain, &z)?, z.clone());
    let mut step = cfg.step0;
    let mut trace = vec![TraceEntry {
        iteration: 0,
        step,
        surrogate: best_surrogate,
        true_gap: Some(best.0),
        best_true_gap: best.0,
    }];
    let mut stale = 0usize;
    for it in 1..=cfg.max_iters {
        let d = domain.load(&z);
        let g_cost = domain.latent_gradient(&proxy_subgradient(case, net, &d, 1.0)?);
        let g_vfa = vfa.subgradient(&z);
        let next: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(k, v)| v + step * (g_cost[k] - g_vfa[k]))
            .collect();
        z = project_latent(&next, domain);
        let s = surrogate(&z)?;
        let mut entry = TraceEntry {
            iteration: it,
            step,
            surrogate: s,
            true_gap: None,
            best_true_gap: best.0,
        };
        if s > best_surrogate {
            best_surrogate = s;
            stale = 0;
            let g = dcopf_gap(case, net, domain, &z)?;
            entry.true_gap = Some(g);
            if g > best.0 {
                best = (g, z.clone());
            }
            entry.best_true_gap = best.0;
        } else {
            stale += 1;
            if stale == cfg.patience {
                step /= cfg.decay;
            }
        }
        trace.push(entry);
        if stale >= cfg.stop_after {
            break;
        }
    }
    Ok(AttackResult {
        load: domain.load(&best.1),
        latent: best.1,
        true_gap: best.0,
        trace,
        origin: (0, 0),
        runs: 1,
        wall_s: timer.elapsed().as_secs_f64(),
    })
}

/// `cfg.starts` runs from [`multi_start`]; the best true gap wins, ties to
/// the earliest start.
pub fn pga_vfa(
    case: &DcopfCase,
    net: &MlpNetwork,
    domain: &LoadDomain,
    vfa: &ValueFunctionApprox,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackResult> {
    let single = AttackConfig { partitions: 1, ..*cfg };
    attack(case, net, domain, vfa, &single, seed)
}

/// Runs every (partition, start) pair on a pool of `cfg.workers` threads.
/// Partition `p` draws its starts with seed `seed ^ p`.
pub fn attack(
    case: &DcopfCase,
    net: &MlpNetwork,
    domain: &LoadDomain,
    vfa: &ValueFunctionApprox,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackResult> {
    cfg.validate()?;
    domain.validate(case)?;
    let timer = Instant::now();
    let parts = partition_domain(domain, cfg.partitions);
    let jobs: Vec<(usize, usize, LoadDomain, Vec<f64>)> = parts
        .iter()
        .enumerate()
        .flat_map(|(p, sub)| {
            multi_start(sub, cfg.starts, seed ^ p as u64)
                .into_iter()
                .enumerate()
                .map(move |(s, z)| (p, s, sub.clone(), z))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Precondition(e.to_string()))?;
    let results: Vec<Result<AttackResult>> = pool.install(|| {
        jobs.par_iter()
            .map(|(p, s, sub, z)| {
                let mut r = pga_from(case, net, sub, vfa, cfg, z)?;
                r.origin = (*p, *s);
                Ok(r)
            })
            .collect()
    });
    let mut best: Option<AttackResult> = None;
    let runs = results.len();
    for r in results {
        let r = r?;
        if best.as_ref().is_none_or(|b| r.true_gap > b.true_gap) {
            best = Some(r);
        }
    }
    let mut best = best.expect("at least one run");
    best.runs = runs;
    best.wall_s = timer.elapsed().as_secs_f64();
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain() -> LoadDomain {
        LoadDomain::new(&DcopfCase::three_bus(), 0.1)
    }

    #[test]
    fn projection_examples() {
        let d = domain();
        let inside = vec![1.02, 0.01, -0.02, 0.0];
        assert_eq!(project_latent(&inside, &d), inside);
        let out = project_latent(&[1.2, 0.0, 0.0, 0.0], &d);
        assert!((out[0] - 1.1).abs() < 1e-15);
        assert_eq!(project_latent(&out, &d), out);
    }

    #[test]
    fn partition_examples() {
        let d = domain();
        assert_eq!(partition_domain(&d, 1), vec![d.clone()]);
        let two = partition_domain(&d, 2);
        assert!((two[0].alpha_lo - 0.9).abs() < 1e-15 && (two[0].alpha_hi - 1.0).abs() < 1e-15);
        assert!((two[1].alpha_lo - 1.0).abs() < 1e-15 && (two[1].alpha_hi - 1.1).abs() < 1e-15);
        let four = partition_domain(&d, 4);
        for p in &four {
            assert!((p.alpha_hi - p.alpha_lo - 0.05).abs() < 1e-12);
        }
        assert_eq!(four[0].alpha_lo, d.alpha_lo);
        assert_eq!(four[3].alpha_hi, d.alpha_hi);
    }

    #[test]
    fn start_examples() {
        let d = domain();
        assert_eq!(multi_start(&d, 1, 0), vec![d.center()]);
        let s = multi_start(&d, 16 + 3, 5);
        assert_eq!(s.len(), 19);
        assert_eq!(s[0], d.lower());
        assert_eq!(s[15], d.upper());
        assert_eq!(s, multi_start(&d, 19, 5));
        for z in &s[16..] {
            assert_eq!(&project_latent(z, &d), z);
        }
    }

    #[test]
    fn vfa_rejects_bad_cuts() {
        assert!(build_vfa(&[]).is_err());
        let bad = [(vec![0.0, 1.0], 1.0, vec![1.0, 2.0]), (vec![0.0], 1.0, vec![1.0])];
        assert!(matches!(build_vfa(&bad), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn ties_pick_lowest_cut() {
        let v = build_vfa(&[(vec![0.0], 0.0, vec![1.0]), (vec![0.0], 0.0, vec![-1.0])]).unwrap();
        assert_eq!(v.eval(&[0.0]), (0.0, 0));
        assert_eq!(v.subgradient(&[0.0]), &[1.0]);
        assert_eq!(v.eval(&[-1.0]).1, 1);
    }
}
