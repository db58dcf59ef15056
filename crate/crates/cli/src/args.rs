use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rainmap_core::forecast::Functional;
use rainmap_core::io::Standardize;
use rainmap_core::sampler::{Initialization, ModelKind};
use rainmap_core::simstudy::ScenarioKind;

/// Spatial rainfall maps from a semi-parametric Binomial-Weibull model.
///
/// Values in `--config` override built-in defaults; flags override both.
#[derive(Debug, Parser)]
#[command(name = "rainmap", version, propagate_version = true)]
pub struct Cli {
    /// TOML run configuration (sections: sampler, ingest, scenario, forecast, study).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for parallel sections [default: number of cores].
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic dataset and write its true-parameter grid.
    Simulate(SimulateArgs),
    /// Run the sampler on a dataset and write the chain archive.
    Fit(FitArgs),
    /// Posterior summaries of a functional on a grid or at target points.
    Forecast(ForecastArgs),
    /// Simulation study: KL surfaces of both models over replicates.
    Study(StudyArgs),
    /// Sampler self-checks.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Semiparametric,
    Parametric,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Semiparametric => ModelKind::SemiParametric,
            ModelArg::Parametric => ModelKind::Parametric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    Nonlinear,
    Linear,
}

impl From<ScenarioArg> for ScenarioKind {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Nonlinear => ScenarioKind::Nonlinear,
            ScenarioArg::Linear => ScenarioKind::Linear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FunctionalArg {
    EventMean,
    EventVariance,
    AnnualMean,
    WetDays,
    KlVsTruth,
}

impl From<FunctionalArg> for Functional {
    fn from(f: FunctionalArg) -> Self {
        match f {
            FunctionalArg::EventMean => Functional::EventMean,
            FunctionalArg::EventVariance => Functional::EventVariance,
            FunctionalArg::AnnualMean => Functional::AnnualMean,
            FunctionalArg::WetDays => Functional::WetDays,
            FunctionalArg::KlVsTruth => Functional::KlVsTruth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StandardizeArg {
    MinMax,
    None,
}

impl From<StandardizeArg> for Standardize {
    fn from(s: StandardizeArg) -> Self {
        match s {
            StandardizeArg::MinMax => Standardize::MinMax,
            StandardizeArg::None => Standardize::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Empirical,
    Zero,
}

impl From<InitArg> for Initialization {
    fn from(i: InitArg) -> Self {
        match i {
            InitArg::Empirical => Initialization::Empirical,
            InitArg::Zero => Initialization::Zero,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DiagnosticTest {
    Geweke,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mutation {
    None,
    /// Use the transposed variance conditionals; the test must then fail.
    PrintedStep2,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// True surfaces to simulate from.
    #[arg(long, value_enum)]
    pub scenario: Option<ScenarioArg>,
    /// Number of stations M.
    #[arg(long, value_name = "M")]
    pub stations: Option<usize>,
    /// Number of years T.
    #[arg(long, value_name = "T")]
    pub years: Option<usize>,
    /// Wet days per station-year.
    #[arg(long, value_name = "N")]
    pub events_per_cell: Option<u32>,
    /// Pixels per side of the true-parameter grid.
    #[arg(long, value_name = "N")]
    pub grid_res: Option<usize>,
    /// CSV with `x,y` station coordinates in [-1, 1]; overrides the built-in layout.
    #[arg(long, value_name = "FILE")]
    pub layout: Option<PathBuf>,
    /// Seed of the simulated magnitudes.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory holding `stations.csv` and `daily.csv`.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// A day is wet when rain_mm exceeds this threshold [default: 0.1].
    #[arg(long, value_name = "MM")]
    pub wet_threshold: Option<f64>,
    /// Inclusive year range, e.g. `1990:2006`.
    #[arg(long, value_name = "FIRST:LAST", value_parser = parse_year_range)]
    pub year_range: Option<(i32, i32)>,
    /// Bernoulli trials per station-year [default: 365].
    #[arg(long, value_name = "N")]
    pub n_trials: Option<u32>,
    /// Covariate standardization [default: min-max].
    #[arg(long, value_enum)]
    pub standardize: Option<StandardizeArg>,
}

fn parse_year_range(s: &str) -> Result<(i32, i32), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected FIRST:LAST, got '{s}'"))?;
    let a = a.trim().parse().map_err(|_| format!("bad year '{a}'"))?;
    let b = b.trim().parse().map_err(|_| format!("bad year '{b}'"))?;
    if b < a {
        return Err(format!("empty year range {a}:{b}"));
    }
    Ok((a, b))
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub ingest: IngestArgs,
    /// Model to fit.
    #[arg(long, value_enum, default_value_t = ModelArg::Semiparametric)]
    pub model: ModelArg,
    /// Total scans, burn-in included [default: 2000].
    #[arg(long, value_name = "N")]
    pub iters: Option<u64>,
    /// Scans discarded before storing [default: 500].
    #[arg(long, value_name = "N")]
    pub burnin: Option<u64>,
    /// Store one scan in every N [default: 1].
    #[arg(long, value_name = "N")]
    pub thin: Option<u64>,
    /// Chain seed [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Chain starting point [default: empirical].
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    /// Per-cell slice updates and conjugate mean redraws after the block updates [default: true].
    #[arg(long, value_name = "BOOL")]
    pub local_updates: Option<bool>,
    /// Write a checkpoint every N scans (0: only at the end).
    #[arg(long, value_name = "N", default_value_t = 500)]
    pub checkpoint_every: u64,
    /// Continue from the checkpoint next to `--out`; refused if the
    /// configuration or data differ from the checkpointed run.
    #[arg(long)]
    pub resume: bool,
    /// Per-scan trace CSV (iteration, log-likelihoods, shrinks) of the scans run now.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    /// Chain archive to write. The checkpoint goes to `<out>.checkpoint.json`.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[group(id = "targets", multiple = false)]
pub struct TargetArgs {
    /// Regular N × N grid over the standardized unit square (two covariates only).
    #[arg(long, value_name = "N", group = "targets")]
    pub grid_res: Option<usize>,
    /// CSV of raw target covariates, with or without a leading `id` column.
    #[arg(long, value_name = "FILE", group = "targets")]
    pub targets_csv: Option<PathBuf>,
    /// True-parameter grid `x,y,gamma,delta` (from `simulate`); its points
    /// become the targets. Required by `kl-vs-truth`.
    #[arg(long, value_name = "FILE", group = "targets")]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    /// Chain archive written by `fit`.
    #[arg(long, value_name = "FILE")]
    pub chain: PathBuf,
    #[command(flatten)]
    pub targets: TargetArgs,
    /// Functional to summarize.
    #[arg(long, value_enum)]
    pub functional: FunctionalArg,
    /// Seed of the forecast draws [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV `x,y,median,q05,q95`.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    /// Scenario [default: nonlinear].
    #[arg(long, value_enum)]
    pub scenario: Option<ScenarioArg>,
    /// Number of stations M [default: 31].
    #[arg(long, value_name = "M")]
    pub stations: Option<usize>,
    /// Replicates per model [default: 8].
    #[arg(long, value_name = "N")]
    pub replicates: Option<usize>,
    /// Scans per fit [default: 2000].
    #[arg(long, value_name = "N")]
    pub iters: Option<u64>,
    /// Burn-in scans per fit [default: 500].
    #[arg(long, value_name = "N")]
    pub burnin: Option<u64>,
    /// Pixels per side of the KL grid [default: 16].
    #[arg(long, value_name = "N")]
    pub grid_res: Option<usize>,
    /// CSV with `x,y` station coordinates; overrides the built-in layout.
    #[arg(long, value_name = "FILE")]
    pub layout: Option<PathBuf>,
    /// Master seed [default: 2024].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Check to run.
    #[arg(long, value_enum, default_value_t = DiagnosticTest::Geweke)]
    pub test: DiagnosticTest,
    /// Model whose sampler is checked.
    #[arg(long, value_enum, default_value_t = ModelArg::Semiparametric)]
    pub model: ModelArg,
    /// Draws per simulator.
    #[arg(long, default_value_t = 100_000)]
    pub draws: usize,
    /// Deliberately broken conditionals, to confirm the check has power.
    #[arg(long, value_enum, default_value_t = Mutation::None)]
    pub mutation: Mutation,
    /// Include the per-cell and conjugate mean updates in the scan.
    #[arg(long, value_name = "BOOL", default_value_t = true, action = clap::ArgAction::Set)]
    pub local_updates: bool,
    /// Seed of both simulators.
    #[arg(long, default_value_t = 20_240_917)]
    pub seed: u64,
}
