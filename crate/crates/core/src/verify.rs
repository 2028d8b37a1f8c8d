//! End-to-end verification runs, gap evaluation, brute-force oracles and
//! report output.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{attack, dcopf_gap, sample_vfa, AttackConfig};
use crate::dcopf::{
    build_bilevel_milp, build_compact_milp, proxy_forward, solve_opf, DcopfCase, DcopfMilp, Formulation,
    FormulationSize, LoadDomain,
};
use crate::encodings::{ibp_mapped, obbt, InputMap};
use crate::error::{Error, Result};
use crate::knapsack::{build_knapsack_compact_milp, evaluate, KnapsackCase, KnapsackDomain};
use crate::milp::{solve_milp, Limits, MilpProblem, MilpResult, MilpStatus, SolveLog};
use crate::neural::{LayerBounds, MlpNetwork};

/// Recertified and MILP objectives may differ by this much before a run is
/// flagged.
pub const RECERTIFY_TOL: f64 = 1e-4;
/// Largest grid an oracle will evaluate.
pub const ORACLE_BUDGET: usize = 10_000_000;
/// Fraction of `M_dual` the incumbent's duals must stay below.
pub const M_DUAL_MARGIN: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Dcopf,
    Knapsack,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObbtMode {
    Lp,
    Milp,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmStart {
    None,
    Reference,
    Pga,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub obbt: ObbtMode,
    pub warm: WarmStart,
    pub limits: Limits,
    pub seed: u64,
    pub attack: AttackConfig,
    /// Cuts sampled for the attack's value-function model.
    pub vfa_cuts: usize,
    /// Bound on the balance and generator-bound duals of the bilevel model;
    /// `10 * M_th` when absent.
    pub m_dual: Option<f64>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            obbt: ObbtMode::Lp,
            warm: WarmStart::Reference,
            limits: Limits::default(),
            seed: 0,
            attack: AttackConfig::default(),
            vfa_cuts: 200,
            m_dual: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerificationReport {
    pub family: Family,
    pub formulation: Formulation,
    pub u: f64,
    /// Worst gap found, recomputed from the incumbent's input.
    pub primal: Option<f64>,
    pub dual: f64,
    pub milp_objective: Option<f64>,
    pub incumbent: Option<Vec<f64>>,
    pub status: MilpStatus,
    pub numerics_suspect: bool,
    /// Warm-start gap, when one was supplied.
    pub warm_gap: Option<f64>,
    pub wall_s: f64,
    pub size_before: FormulationSize,
    pub size_after: FormulationSize,
    pub warnings: Vec<String>,
    pub log: SolveLog,
}

impl VerificationReport {
    /// `(dual - primal) / max(1, |primal|)`
    pub fn relative_gap(&self) -> f64 {
        match self.primal {
            Some(p) => (self.dual - p) / p.abs().max(1.0),
            None => f64::INFINITY,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_header() -> &'static str {
        "system,u,formulation,primal,dual,time_s"
    }

    pub fn csv_row(&self, system: &str) -> String {
        let primal = self.primal.map_or(String::new(), |p| p.to_string());
        let form = match self.formulation {
            Formulation::Compact => "compact",
            Formulation::Bilevel => "bilevel",
        };
        format!("{system},{},{form},{primal},{},{}", self.u, self.dual, self.wall_s)
    }
}

/// `(t_bilevel - t_compact) / t_compact`
pub fn speedup(t_bilevel: f64, t_compact: f64) -> f64 {
    (t_bilevel - t_compact) / t_compact
}

/// Proxy cost minus the optimal cost at load `d`.
pub fn true_gap(case: &DcopfCase, net: &MlpNetwork, d: &[f64]) -> Result<f64> {
    let proxy = proxy_forward(case, net, d)?.cost;
    Ok(proxy - solve_opf(case, d)?.objective)
}

/// Optimal value minus the proxy's value at latent `z`.
pub fn knapsack_true_gap(case: &KnapsackCase, net: &MlpNetwork, domain: &KnapsackDomain, z: &[f64]) -> Result<f64> {
    Ok(evaluate(case, net, domain, z)?.gap)
}

/// Pre-activation bounds over the latent box.
pub fn network_bounds(net: &MlpNetwork, map: &InputMap, lo: &[f64], hi: &[f64], mode: ObbtMode) -> Result<LayerBounds> {
    match mode {
        ObbtMode::Lp => obbt(net, map, lo, hi, true),
        ObbtMode::Milp => obbt(net, map, lo, hi, false),
        ObbtMode::Off => ibp_mapped(net, map, lo, hi),
    }
}

fn seeded(problem: MilpProblem, warm: Option<Vec<f64>>) -> MilpProblem {
    MilpProblem {
        warm_start: warm,
        ..problem
    }
}

struct Certified {
    primal: Option<f64>,
    incumbent: Option<Vec<f64>>,
    suspect: bool,
    warnings: Vec<String>,
}

/// Box and seed for probing around an incumbent that sits on a discontinuity
/// of the gap, where the MILP may break ties differently from the evaluator.
struct Probe<'a> {
    lower: &'a [f64],
    upper: &'a [f64],
    seed: u64,
}

const PROBE_RADII: [f64; 4] = [1e-8, 1e-7, 1e-6, 1e-5];
const PROBE_SAMPLES: usize = 64;

fn certify<F>(res: &MilpResult, latent: &[usize], gap_at: F, probe: Option<Probe>) -> Result<Certified>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut out = Certified {
        primal: None,
        incumbent: None,
        suspect: false,
        warnings: Vec::new(),
    };
    if let (Some(x), Some(obj)) = (&res.x, res.objective) {
        let tol = RECERTIFY_TOL * (1.0 + obj.abs());
        let mut z: Vec<f64> = latent.iter().map(|&j| x[j]).collect();
        let mut g = gap_at(&z)?;
        if (g - obj).abs() > tol {
            if let Some(p) = probe {
                let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
                let center = z.clone();
                'radii: for r in PROBE_RADII {
                    for _ in 0..PROBE_SAMPLES {
                        let y: Vec<f64> = center
                            .iter()
                            .zip(p.lower.iter().zip(p.upper))
                            .map(|(&c, (&lo, &hi))| (c + r * rng.gen_range(-1.0..=1.0)).clamp(lo, hi))
                            .collect();
                        let gy = gap_at(&y)?;
                        if gy > g {
                            g = gy;
                            z = y;
                        }
                        if (g - obj).abs() <= tol {
                            out.warnings.push(format!(
                                "incumbent lies on a discontinuity of the gap; recovered {g} within {r} of it"
                            ));
                            break 'radii;
                        }
                    }
                }
            }
        }
        if (g - obj).abs() > tol {
            out.suspect = true;
            out.warnings
                .push(format!("MILP objective {obj} but recomputed gap {g} at the incumbent"));
        }
        out.primal = Some(g);
        out.incumbent = Some(z);
    }
    Ok(out)
}

/// Builds, warm-starts and solves a DC-OPF verification MILP.
pub fn verify_dcopf(
    case: &DcopfCase,
    net: &MlpNetwork,
    domain: &LoadDomain,
    formulation: Formulation,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let timer = Instant::now();
    domain.validate(case)?;
    let bounds = network_bounds(net, &domain.input_map(), &domain.lower(), &domain.upper(), opts.obbt)?;
    let m_dual = opts.m_dual.unwrap_or(10.0 * case.m_th);
    let milp: DcopfMilp = match formulation {
        Formulation::Compact => build_compact_milp(case, net, domain, &bounds)?,
        Formulation::Bilevel => build_bilevel_milp(case, net, domain, &bounds, m_dual)?,
    };
    let mut warnings = Vec::new();
    let start = match opts.warm {
        WarmStart::None => None,
        WarmStart::Reference => Some(domain.center()),
        WarmStart::Pga => {
            let vfa = sample_vfa(case, domain, opts.vfa_cuts.max(1), opts.seed)?;
            let found = attack(case, net, domain, &vfa, &opts.attack, opts.seed)?;
            let center = domain.center();
            if found.true_gap > dcopf_gap(case, net, domain, &center)? {
                Some(found.latent)
            } else {
                Some(center)
            }
        }
    };
    let warm_gap = start.as_ref().map(|z| dcopf_gap(case, net, domain, z)).transpose()?;
    let warm = start.as_ref().map(|z| milp.complete(case, domain, z)).transpose()?;
    let res = solve_milp(&seeded(milp.problem(), warm), opts.limits, opts.seed)?;
    let cert = certify(&res, &milp.latent, |z| dcopf_gap(case, net, domain, z), None)?;
    warnings.extend(res.log.warnings.iter().cloned());
    warnings.extend(cert.warnings);
    let mut suspect = cert.suspect;
    if formulation == Formulation::Bilevel {
        if let Some(z) = &cert.incumbent {
            let mag = milp.dual_magnitude(case, &domain.load(z))?;
            if mag >= M_DUAL_MARGIN * m_dual {
                suspect = true;
                warnings.push(format!("dual magnitude {mag} is close to M_dual = {m_dual}"));
            }
        }
    }
    let (size_before, size_after) = milp.sizes();
    Ok(VerificationReport {
        family: Family::Dcopf,
        formulation,
        u: domain.u(),
        primal: cert.primal,
        dual: res.best_bound,
        milp_objective: res.objective,
        incumbent: cert.incumbent,
        status: res.status,
        numerics_suspect: suspect,
        warm_gap,
        wall_s: timer.elapsed().as_secs_f64(),
        size_before,
        size_after,
        warnings,
        log: res.log,
    })
}

/// Compact verification of a knapsack proxy. Only the reference warm start
/// is available: the value function is not convex, so there are no cuts to
/// guide an attack.
pub fn verify_knapsack(
    case: &KnapsackCase,
    net: &MlpNetwork,
    domain: &KnapsackDomain,
    formulation: Formulation,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let timer = Instant::now();
    if formulation == Formulation::Bilevel {
        return Err(Error::Unsupported("bilevel unavailable for non-convex family".into()));
    }
    if opts.warm == WarmStart::Pga {
        return Err(Error::Unsupported(
            "pga warm start unavailable for non-convex family".into(),
        ));
    }
    domain.validate()?;
    let bounds = network_bounds(net, &domain.input_map(), &domain.lower(), &domain.upper(), opts.obbt)?;
    let milp = build_knapsack_compact_milp(case, net, domain, &bounds)?;
    let start = (opts.warm == WarmStart::Reference).then(|| domain.center());
    let warm_gap = start
        .as_ref()
        .map(|z| knapsack_true_gap(case, net, domain, z))
        .transpose()?;
    let warm = start
        .as_ref()
        .map(|z| milp.complete(case, net, domain, z))
        .transpose()?;
    let res = solve_milp(&seeded(milp.problem(), warm), opts.limits, opts.seed)?;
    let (lower, upper) = (domain.lower(), domain.upper());
    let probe = Probe {
        lower: &lower,
        upper: &upper,
        seed: opts.seed,
    };
    let cert = certify(
        &res,
        &milp.latent,
        |z| knapsack_true_gap(case, net, domain, z),
        Some(probe),
    )?;
    let mut warnings: Vec<String> = res.log.warnings.clone();
    warnings.extend(cert.warnings);
    let (size_before, size_after) = milp.sizes();
    Ok(VerificationReport {
        family: Family::Knapsack,
        formulation,
        u: domain.u,
        primal: cert.primal,
        dual: res.best_bound,
        milp_objective: res.objective,
        incumbent: cert.incumbent,
        status: res.status,
        numerics_suspect: cert.suspect,
        warm_gap,
        wall_s: timer.elapsed().as_secs_f64(),
        size_before,
        size_after,
        warnings,
        log: res.log,
    })
}

/// One DC-OPF configuration of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchJob {
    pub u: f64,
    pub formulation: Formulation,
    pub warm: WarmStart,
}

/// Runs `jobs` on a pool of `workers` threads; results keep the job order.
pub fn verify_batch(
    case: &DcopfCase,
    net: &MlpNetwork,
    jobs: &[BatchJob],
    opts: &VerifyOptions,
    workers: usize,
) -> Result<Vec<Result<VerificationReport>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Precondition(e.to_string()))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let domain = LoadDomain::new(case, job.u);
                let o = VerifyOptions {
                    warm: job.warm,
                    ..opts.clone()
                };
                verify_dcopf(case, net, &domain, job.formulation, &o)
            })
            .collect()
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub max: f64,
    pub argmax: Vec<f64>,
    /// Largest difference between neighbouring grid values.
    pub slack: f64,
    pub points: usize,
}

/// Exhaustive search of `f` over `resolution` points per coordinate,
/// endpoints included; a coordinate with `lower == upper` gets one point.
/// Ties go to the first point in index order.
pub fn grid_search<F>(lower: &[f64], upper: &[f64], resolution: usize, f: F) -> Result<GridResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let dim = lower.len();
    let r = resolution.max(1);
    let counts: Vec<usize> = (0..dim).map(|k| if upper[k] == lower[k] { 1 } else { r }).collect();
    let points = counts
        .iter()
        .try_fold(1usize, |acc, &c| acc.checked_mul(c).filter(|&p| p <= ORACLE_BUDGET));
    let Some(points) = points else {
        return Err(Error::BudgetExceeded(format!(
            "{r}^{dim} grid points exceed {ORACLE_BUDGET}"
        )));
    };
    let coord = |idx: usize| -> Vec<f64> {
        let mut rem = idx;
        (0..dim)
            .map(|k| {
                let t = rem % counts[k];
                rem /= counts[k];
                if counts[k] == 1 {
                    0.5 * (lower[k] + upper[k])
                } else {
                    lower[k] + (upper[k] - lower[k]) * t as f64 / (r - 1) as f64
                }
            })
            .collect()
    };
    let values: Vec<f64> = (0..points)
        .into_par_iter()
        .map(|i| f(&coord(i)))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    let mut slack = 0.0_f64;
    let mut stride = 1;
    for &c in &counts {
        for i in 0..points {
            if (i / stride) % c + 1 < c {
                slack = slack.max((values[i + stride] - values[i]).abs());
            }
        }
        stride *= c;
    }
    Ok(GridResult {
        max: values[best],
        argmax: coord(best),
        slack,
        points,
    })
}

/// Grid oracle for the DC-OPF gap over the latent box.
pub fn oracle_grid(case: &DcopfCase, net: &MlpNetwork, domain: &LoadDomain, resolution: usize) -> Result<GridResult> {
    grid_search(&domain.lower(), &domain.upper(), resolution, |z| {
        dcopf_gap(case, net, domain, z)
    })
}

/// Grid oracle for the knapsack gap over the latent box.
pub fn knapsack_oracle_grid(
    case: &KnapsackCase,
    net: &MlpNetwork,
    domain: &KnapsackDomain,
    resolution: usize,
) -> Result<GridResult> {
    grid_search(&domain.lower(), &domain.upper(), resolution, |z| {
        knapsack_true_gap(case, net, domain, z)
    })
}

/// `(prod (x_i + s))^(1/n) - s`, computed in log space.
pub fn shifted_geomean(values: &[f64], shift: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Precondition("no values to average".into()));
    }
    let mut acc = 0.0;
    for &v in values {
        let t = v + shift;
        if !(t > 0.0) {
            return Err(Error::Precondition(format!(
                "shifted value {v} + {shift} is not positive"
            )));
        }
        acc += t.ln();
    }
    Ok((acc / values.len() as f64).exp() - shift)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geomean_examples() {
        assert!((shifted_geomean(&[0.0, 3.0], 1.0).unwrap() - 1.0).abs() < 1e-12);
        for s in [0.0, 0.01, 1.0, 7.5] {
            assert!((shifted_geomean(&[2.5, 2.5], s).unwrap() - 2.5).abs() < 1e-12);
        }
        assert!((shifted_geomean(&[2.0, 8.0], 0.0).unwrap() - 4.0).abs() < 1e-12);
        assert!(shifted_geomean(&[-1.0, 2.0], 1.0).is_err());
        assert!(shifted_geomean(&[], 1.0).is_err());
    }

    #[test]
    fn grid_covers_endpoints_and_slack() {
        let g = grid_search(&[0.0, -1.0], &[1.0, 1.0], 3, |z| Ok(z[0] + z[1])).unwrap();
        assert_eq!(g.points, 9);
        assert_eq!(g.max, 2.0);
        assert_eq!(g.argmax, vec![1.0, 1.0]);
        assert!((g.slack - 1.0).abs() < 1e-12);
        assert!(matches!(
            grid_search(&[0.0; 8], &[1.0; 8], 10, |_| Ok(0.0)),
            Err(Error::BudgetExceeded(_))
        ));
    }

    #[test]
    fn knapsack_rejects_bilevel() {
        let case = KnapsackCase::desk();
        let net = MlpNetwork::random(&[6, 4, 5], 1).unwrap();
        let d = KnapsackDomain::new(&case, 0.1);
        let e = verify_knapsack(&case, &net, &d, Formulation::Bilevel, &VerifyOptions::default()).unwrap_err();
        assert_eq!(e.to_string(), "unsupported: bilevel unavailable for non-convex family");
    }

    #[test]
    fn csv_shape() {
        assert_eq!(VerificationReport::csv_header().split(',').count(), 6);
        assert!((speedup(3.0, 1.0) - 2.0).abs() < 1e-15);
    }
}
