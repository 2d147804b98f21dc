use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cr3bp_core::equilibria::{auto_above_l1, auto_below_l1};
use cr3bp_core::{Chart, CutoffSpec, Error, IntegratorConfig, Projection, Result};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(
    name = "cr3bp",
    version,
    about = "Regularized spatial restricted three-body experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: CommandLine,
}

#[derive(Subcommand, Debug)]
pub enum CommandLine {
    /// Lagrange points and their critical values.
    Equilibria(RunArgs),
    /// Sampled transversality scan of the open-book section.
    Scan(RunArgs),
    /// First-return maps from sampled starts.
    ReturnMap(RunArgs),
    /// A single regularized orbit written as JSON lines.
    Orbit(RunArgs),
    /// Numerical versus closed-form rotating-Kepler return map.
    KeplerCompare(RunArgs),
    /// Normal-Hessian certificate along the binding.
    Convexity(RunArgs),
    /// Table of circular-orbit radii, momenta and periods.
    Golden(RunArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Equilibria,
    Scan,
    ReturnMap,
    Orbit,
    KeplerCompare,
    Convexity,
    Golden,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ChartArg {
    Moon,
    Earth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionArg {
    EveryStep,
    Never,
}

/// Energy given as a number or as one of the shorthands relative to `H(L1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergyArg {
    Value(f64),
    AutoBelowL1,
    AutoAboveL1,
}

impl FromStr for EnergyArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto-below-L1" | "auto-below-l1" => Ok(Self::AutoBelowL1),
            "auto-above-L1" | "auto-above-l1" => Ok(Self::AutoAboveL1),
            _ => s
                .parse::<f64>()
                .map(Self::Value)
                .map_err(|_| format!("expected a number, auto-below-L1 or auto-above-L1, got {s:?}")),
        }
    }
}

#[derive(Args, Clone, Debug)]
pub struct RunArgs {
    /// Mass ratio of the regularized primary.
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub mu: f64,
    /// Jacobi energy: a number, auto-below-L1 or auto-above-L1.
    #[arg(long, allow_negative_numbers = true)]
    pub c: Option<EnergyArg>,
    #[arg(long, value_enum, default_value_t = ChartArg::Moon)]
    pub chart: ChartArg,
    /// Cutoff start: the interpolation begins at xi0 = 1 - delta.
    #[arg(long, default_value_t = 0.4, allow_negative_numbers = true)]
    pub delta: f64,
    /// Cutoff end: the interpolation is complete at xi0 = 1 - epsilon.
    #[arg(long, default_value_t = 0.15, allow_negative_numbers = true)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-10, allow_negative_numbers = true)]
    pub rel_tol: f64,
    #[arg(long, default_value_t = 1e-12, allow_negative_numbers = true)]
    pub abs_tol: f64,
    #[arg(long, default_value_t = 0.25, allow_negative_numbers = true)]
    pub max_step: f64,
    /// Flow-time budget; also the orbit length for `orbit`.
    #[arg(long, default_value_t = 500.0, allow_negative_numbers = true)]
    pub max_time: f64,
    #[arg(long, value_enum, default_value_t = ProjectionArg::EveryStep)]
    pub projection: ProjectionArg,
    /// Number of samples (rows for `golden`).
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = "cr3bp-output")]
    pub output_path: PathBuf,
    /// Also write SVG plots.
    #[arg(long)]
    pub emit_plot: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub mu: f64,
    pub c: f64,
    pub c_input: EnergyArg,
    pub chart: ChartArg,
    pub delta: f64,
    pub epsilon: f64,
    pub integrator: IntegratorConfig,
    pub n_samples: usize,
    pub seed: u64,
    pub output_path: PathBuf,
    pub emit_plot: bool,
}

impl RunConfig {
    pub fn from_cli(cli: Cli) -> Result<Self> {
        let (command, a) = match cli.command {
            CommandLine::Equilibria(a) => (Command::Equilibria, a),
            CommandLine::Scan(a) => (Command::Scan, a),
            CommandLine::ReturnMap(a) => (Command::ReturnMap, a),
            CommandLine::Orbit(a) => (Command::Orbit, a),
            CommandLine::KeplerCompare(a) => (Command::KeplerCompare, a),
            CommandLine::Convexity(a) => (Command::Convexity, a),
            CommandLine::Golden(a) => (Command::Golden, a),
        };
        if !(a.mu > 0.0 && a.mu < 1.0) {
            return Err(Error::ConfigError(format!("--mu must lie in (0, 1), got {}", a.mu)));
        }
        let default_c = match command {
            Command::KeplerCompare => EnergyArg::Value(-2.0),
            Command::Golden => EnergyArg::Value(-1.5),
            _ => EnergyArg::AutoBelowL1,
        };
        let c_input = a.c.unwrap_or(default_c);
        let c = match c_input {
            EnergyArg::Value(v) if v.is_finite() => v,
            EnergyArg::Value(v) => return Err(Error::ConfigError(format!("--c must be finite, got {v}"))),
            EnergyArg::AutoBelowL1 => auto_below_l1(a.mu)?,
            EnergyArg::AutoAboveL1 => auto_above_l1(a.mu)?,
        };
        CutoffSpec::new(a.delta, a.epsilon, 1.0)?;
        let integrator = IntegratorConfig {
            rel_tol: a.rel_tol,
            abs_tol: a.abs_tol,
            max_step: a.max_step,
            max_time: a.max_time,
            projection: match a.projection {
                ProjectionArg::EveryStep => Projection::EveryStep,
                ProjectionArg::Never => Projection::Never,
            },
        };
        integrator.validate()?;
        let n_samples = a.samples.unwrap_or(match command {
            Command::Scan => 10_000,
            Command::Convexity => 1000,
            Command::Golden => 11,
            Command::Orbit | Command::Equilibria => 1,
            Command::ReturnMap | Command::KeplerCompare => 100,
        });
        if n_samples == 0 {
            return Err(Error::ConfigError("--samples must be positive".into()));
        }
        Ok(Self {
            command,
            mu: a.mu,
            c,
            c_input,
            chart: a.chart,
            delta: a.delta,
            epsilon: a.epsilon,
            integrator,
            n_samples,
            seed: a.seed,
            output_path: a.output_path,
            emit_plot: a.emit_plot,
        })
    }

    pub fn chart(&self) -> Chart {
        match self.chart {
            ChartArg::Moon => Chart::Moon,
            ChartArg::Earth => Chart::Earth,
        }
    }
}
