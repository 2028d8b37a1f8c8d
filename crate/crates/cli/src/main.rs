mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use optverify::attack::{attack, sample_vfa};
use optverify::dcopf::{
    build_bilevel_milp, build_compact_milp, generate_instances, train_proxy, DcopfCase, Formulation, LoadDomain,
};
use optverify::knapsack::{build_knapsack_compact_milp, knapsack_exact, train_scores, KnapsackCase, KnapsackDomain};
use optverify::lp::write_mps;
use optverify::milp::MilpStatus;
use optverify::neural::MlpNetwork;
use optverify::verify::{knapsack_oracle_grid, network_bounds, oracle_grid, verify_dcopf, verify_knapsack};
use optverify::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use config::{FamilyArg, Settings};

#[derive(Parser, Debug)]
#[command(
    name = "optverify",
    version,
    about = "Worst-case gap verification for optimization proxies"
)]
struct Cli {
    /// TOML file with default settings; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the verification MILP and write a report
    Verify(Settings),
    /// Run the gradient attack on the value-function surrogate
    Attack(Settings),
    /// Evaluate the gap on a uniform grid over the input box
    Oracle(Settings),
    /// Train a network and write its weights
    Train(Settings),
    /// Sample solved instances
    Gen(Settings),
    /// Write the verification MILP in MPS format
    ExportMps(Settings),
}

#[derive(Debug)]
pub struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::new("io", format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::InvalidModel(_) => "invalid_model",
            Error::NumericalFailure(_) => "numerical_failure",
            Error::InfiniteBound(_) => "infinite_bound",
            Error::ProjectionInfeasible { .. } => "projection_infeasible",
            Error::InfeasibleLowerLevel => "infeasible_lower_level",
            Error::BudgetExceeded(_) => "budget_exceeded",
            Error::Schema(_) | Error::Json(_) => "schema",
            Error::Unsupported(_) => "unsupported",
            Error::Precondition(_) => "precondition",
            Error::Io(_) => "io",
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new("schema", e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

enum Case {
    Dcopf(DcopfCase),
    Knapsack(KnapsackCase),
}

fn load_case(s: &Settings) -> CliResult<Case> {
    let arg = s
        .case
        .as_deref()
        .ok_or_else(|| CliError::new("usage", "--case is required"))?;
    if let Some(name) = arg.strip_prefix("builtin:") {
        return match (s.family(), name) {
            (FamilyArg::Knapsack, "knapsack5") => Ok(Case::Knapsack(KnapsackCase::desk())),
            (FamilyArg::Knapsack, "knapsack10") => Ok(Case::Knapsack(KnapsackCase::desk_ten())),
            (FamilyArg::Dcopf, _) => DcopfCase::desk(name)
                .map(Case::Dcopf)
                .ok_or_else(|| CliError::new("usage", format!("no built-in DC-OPF case named {name:?}"))),
            _ => Err(CliError::new(
                "usage",
                format!("no built-in knapsack case named {name:?}"),
            )),
        };
    }
    let path = Path::new(arg);
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(match s.family() {
        FamilyArg::Dcopf => Case::Dcopf(DcopfCase::from_json(&text)?),
        FamilyArg::Knapsack => Case::Knapsack(KnapsackCase::from_json(&text)?),
    })
}

fn load_net(s: &Settings) -> CliResult<MlpNetwork> {
    let path = s
        .weights
        .as_deref()
        .ok_or_else(|| CliError::new("usage", "--weights is required"))?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(MlpNetwork::from_json(&text)?)
}

fn dcopf_domain(case: &DcopfCase, s: &Settings) -> CliResult<LoadDomain> {
    let d = LoadDomain::new(case, s.u()?);
    Ok(if s.freeze_beta.unwrap_or(false) {
        d.frozen_beta()
    } else {
        d
    })
}

fn emit(s: &Settings, text: &str) -> CliResult<()> {
    match &s.out {
        Some(p) => std::fs::write(p, format!("{text}\n")).map_err(|e| CliError::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn emit_json<T: Serialize>(s: &Settings, value: &T) -> CliResult<()> {
    emit(s, &serde_json::to_string_pretty(value)?)
}

fn cmd_verify(s: &Settings) -> CliResult<u8> {
    let net = load_net(s)?;
    let opts = s.verify_options()?;
    let report = match load_case(s)? {
        Case::Dcopf(case) => verify_dcopf(&case, &net, &dcopf_domain(&case, s)?, s.formulation(), &opts)?,
        Case::Knapsack(case) => {
            let domain = KnapsackDomain::new(&case, s.u()?);
            verify_knapsack(&case, &net, &domain, s.formulation(), &opts)?
        }
    };
    emit(s, &report.to_json()?)?;
    Ok(match report.status {
        MilpStatus::TimeLimit | MilpStatus::NodeLimit => 2,
        _ => 0,
    })
}

fn cmd_attack(s: &Settings) -> CliResult<u8> {
    let Case::Dcopf(case) = load_case(s)? else {
        return Err(CliError::new(
            "unsupported",
            "attack needs a convex family with duals; use dcopf",
        ));
    };
    let net = load_net(s)?;
    let domain = dcopf_domain(&case, s)?;
    let vfa = sample_vfa(&case, &domain, s.vfa_cuts.unwrap_or(200), s.seed())?;
    let res = attack(&case, &net, &domain, &vfa, &s.attack(), s.seed())?;
    emit(s, &res.to_json()?)?;
    Ok(0)
}

fn cmd_oracle(s: &Settings) -> CliResult<u8> {
    let net = load_net(s)?;
    let resolution = s.resolution.unwrap_or(21);
    let grid = match load_case(s)? {
        Case::Dcopf(case) => oracle_grid(&case, &net, &dcopf_domain(&case, s)?, resolution)?,
        Case::Knapsack(case) => knapsack_oracle_grid(&case, &net, &KnapsackDomain::new(&case, s.u()?), resolution)?,
    };
    emit_json(s, &grid)?;
    Ok(0)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    losses: &'a [f64],
    network: &'a MlpNetwork,
}

fn fresh_net(input: usize, output: usize, s: &Settings) -> CliResult<MlpNetwork> {
    if s.weights.is_some() {
        return load_net(s);
    }
    let mut widths = vec![input];
    widths.extend(s.hidden.clone().unwrap_or_else(|| vec![16, 16]));
    widths.push(output);
    Ok(MlpNetwork::random(&widths, s.seed())?)
}

fn cmd_train(s: &Settings) -> CliResult<u8> {
    let n = s.n.unwrap_or(200);
    let epochs = s.epochs.unwrap_or(50);
    let (net, losses) = match load_case(s)? {
        Case::Dcopf(case) => {
            let mut net = fresh_net(case.buses, case.buses, s)?;
            let set = generate_instances(&case, n, s.seed())?;
            let loads: Vec<Vec<f64>> = set.instances.into_iter().map(|i| i.d).collect();
            let losses = train_proxy(&case, &mut net, &loads, epochs, s.lr.unwrap_or(1e-3), case.m_th)?;
            (net, losses)
        }
        Case::Knapsack(case) => {
            let domain = KnapsackDomain::new(&case, s.u()?);
            let mut net = fresh_net(case.k + 1, case.k, s)?;
            let losses = train_scores(&case, &mut net, &domain, n, epochs, s.lr.unwrap_or(2e-3), s.seed())?;
            (net, losses)
        }
    };
    match &s.out {
        Some(p) => {
            net.save_weights(p)?;
            let last = losses.last().copied().unwrap_or(f64::NAN);
            eprintln!("{}", serde_json::json!({ "epochs": losses.len(), "final_loss": last }));
        }
        None => emit_json(
            s,
            &TrainSummary {
                losses: &losses,
                network: &net,
            },
        )?,
    }
    Ok(0)
}

#[derive(Serialize)]
struct KnapsackDraw {
    latent: Vec<f64>,
    v: Vec<f64>,
    l: f64,
    phi: f64,
    y: Vec<u8>,
}

fn cmd_gen(s: &Settings) -> CliResult<u8> {
    let n = s.n.unwrap_or(100);
    match load_case(s)? {
        Case::Dcopf(case) => emit_json(s, &generate_instances(&case, n, s.seed())?)?,
        Case::Knapsack(case) => {
            let domain = KnapsackDomain::new(&case, s.u()?);
            let (lo, hi) = (domain.lower(), domain.upper());
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed());
            let mut draws = Vec::with_capacity(n);
            for _ in 0..n {
                let z: Vec<f64> = lo
                    .iter()
                    .zip(&hi)
                    .map(|(&a, &b)| if a < b { rng.gen_range(a..=b) } else { a })
                    .collect();
                let (v, l) = domain.instance(&z);
                let (phi, y) = knapsack_exact(&v, &case.w, l)?;
                draws.push(KnapsackDraw {
                    latent: z,
                    v,
                    l,
                    phi,
                    y,
                });
            }
            emit_json(s, &draws)?
        }
    }
    Ok(0)
}

fn cmd_export_mps(s: &Settings) -> CliResult<u8> {
    let net = load_net(s)?;
    let (problem, name) = match load_case(s)? {
        Case::Dcopf(case) => {
            let domain = dcopf_domain(&case, s)?;
            let bounds = network_bounds(&net, &domain.input_map(), &domain.lower(), &domain.upper(), s.obbt())?;
            let milp = match s.formulation() {
                Formulation::Compact => build_compact_milp(&case, &net, &domain, &bounds)?,
                Formulation::Bilevel => build_bilevel_milp(&case, &net, &domain, &bounds, 10.0 * case.m_th)?,
            };
            (milp.problem(), "DCOPFGAP")
        }
        Case::Knapsack(case) => {
            if s.formulation() == Formulation::Bilevel {
                return Err(Error::Unsupported("bilevel unavailable for non-convex family".into()).into());
            }
            let domain = KnapsackDomain::new(&case, s.u()?);
            let bounds = network_bounds(&net, &domain.input_map(), &domain.lower(), &domain.upper(), s.obbt())?;
            (
                build_knapsack_compact_milp(&case, &net, &domain, &bounds)?.problem(),
                "KNAPGAP",
            )
        }
    };
    emit(s, write_mps(&problem.lp, &problem.binaries, name).trim_end())?;
    Ok(0)
}

fn run(cli: Cli) -> CliResult<u8> {
    let base = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    match cli.command {
        Command::Verify(s) => cmd_verify(&s.over(base)),
        Command::Attack(s) => cmd_attack(&s.over(base)),
        Command::Oracle(s) => cmd_oracle(&s.over(base)),
        Command::Train(s) => cmd_train(&s.over(base)),
        Command::Gen(s) => cmd_gen(&s.over(base)),
        Command::ExportMps(s) => cmd_export_mps(&s.over(base)),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": e.kind, "message": e.message }));
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            return fail(&CliError::new(
                "usage",
                e.render().to_string().lines().next().unwrap_or("").to_string(),
            ))
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => fail(&e),
    }
}
