use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use optverify::attack::AttackConfig;
use optverify::dcopf::Formulation;
use optverify::milp::Limits;
use optverify::verify::{ObbtMode, VerifyOptions, WarmStart};
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyArg {
    Dcopf,
    Knapsack,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormulationArg {
    Compact,
    Bilevel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObbtArg {
    Lp,
    Milp,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmArg {
    None,
    Reference,
    Pga,
}

/// Flags shared by every subcommand. Each may also come from the `--config`
/// file, with flags winning.
#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Case JSON, or `builtin:<name>` for 1bus, 2bus, 3bus, knapsack5, knapsack10
    #[arg(long)]
    pub case: Option<String>,
    /// Network weights JSON
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub family: Option<FamilyArg>,
    /// Half-width of the load (or value) perturbation box
    #[arg(long)]
    pub u: Option<f64>,
    #[arg(long, value_enum)]
    pub formulation: Option<FormulationArg>,
    #[arg(long, value_enum)]
    pub obbt: Option<ObbtArg>,
    #[arg(long, value_enum)]
    pub warm: Option<WarmArg>,
    /// Wall-clock limit for the MILP in seconds
    #[arg(long)]
    pub time_limit: Option<f64>,
    /// Relative optimality gap
    #[arg(long)]
    pub gap: Option<f64>,
    #[arg(long)]
    pub node_cap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub starts: Option<usize>,
    #[arg(long)]
    pub partitions: Option<usize>,
    /// Cuts sampled for the attack's value-function model
    #[arg(long)]
    pub vfa_cuts: Option<usize>,
    /// Fix the per-bus shifts at zero so only the scale varies
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub freeze_beta: Option<bool>,
    /// Samples for gen and train
    #[arg(long)]
    pub n: Option<usize>,
    /// Grid points per axis for oracle
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Hidden layer widths for a fresh network, e.g. `16,16`
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Output path; standard output when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($f:ident),*) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f; } )*
    };
}

impl Settings {
    /// Fills every unset field from `base`.
    pub fn over(mut self, base: Settings) -> Settings {
        overlay!(
            self,
            base,
            case,
            weights,
            family,
            u,
            formulation,
            obbt,
            warm,
            time_limit,
            gap,
            node_cap,
            seed,
            workers,
            starts,
            partitions,
            vfa_cuts,
            freeze_beta,
            n,
            resolution,
            epochs,
            lr,
            hidden,
            out
        );
        self
    }

    pub fn load(path: &Path) -> Result<Settings, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::new("schema", format!("{}: {}", path.display(), e.message())))
    }

    pub fn family(&self) -> FamilyArg {
        self.family.unwrap_or(FamilyArg::Dcopf)
    }

    pub fn u(&self) -> Result<f64, CliError> {
        let u = self.u.unwrap_or(0.05);
        if !(u >= 0.0) || !u.is_finite() {
            return Err(CliError::new(
                "usage",
                format!("--u must be a finite value >= 0, got {u}"),
            ));
        }
        Ok(u)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn formulation(&self) -> Formulation {
        match self.formulation.unwrap_or(FormulationArg::Compact) {
            FormulationArg::Compact => Formulation::Compact,
            FormulationArg::Bilevel => Formulation::Bilevel,
        }
    }

    pub fn obbt(&self) -> ObbtMode {
        match self.obbt.unwrap_or(ObbtArg::Lp) {
            ObbtArg::Lp => ObbtMode::Lp,
            ObbtArg::Milp => ObbtMode::Milp,
            ObbtArg::Off => ObbtMode::Off,
        }
    }

    pub fn limits(&self) -> Result<Limits, CliError> {
        let d = Limits::default();
        let l = Limits {
            time_s: self.time_limit.unwrap_or(d.time_s),
            gap_rel: self.gap.unwrap_or(d.gap_rel),
            node_cap: self.node_cap.unwrap_or(d.node_cap),
        };
        if !(l.time_s > 0.0) {
            return Err(CliError::new(
                "usage",
                format!("--time-limit must be positive, got {}", l.time_s),
            ));
        }
        if !(l.gap_rel >= 0.0) {
            return Err(CliError::new("usage", format!("--gap must be >= 0, got {}", l.gap_rel)));
        }
        Ok(l)
    }

    pub fn attack(&self) -> AttackConfig {
        let d = AttackConfig::default();
        AttackConfig {
            workers: self.workers.unwrap_or(d.workers),
            starts: self.starts.unwrap_or(d.starts),
            partitions: self.partitions.unwrap_or(d.partitions),
            ..d
        }
    }

    pub fn verify_options(&self) -> Result<VerifyOptions, CliError> {
        let d = VerifyOptions::default();
        Ok(VerifyOptions {
            obbt: self.obbt(),
            warm: match self.warm.unwrap_or(WarmArg::Reference) {
                WarmArg::None => WarmStart::None,
                WarmArg::Reference => WarmStart::Reference,
                WarmArg::Pga => WarmStart::Pga,
            },
            limits: self.limits()?,
            seed: self.seed(),
            attack: self.attack(),
            vfa_cuts: self.vfa_cuts.unwrap_or(d.vfa_cuts),
            m_dual: None,
        })
    }
}
