//! Simulation study: true parameter surfaces, synthetic data with fixed
//! counts, replicate fits of both models and per-pixel KL aggregation.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::WeibullLogParams;
use crate::error::{Error, Result};
use crate::forecast::{forecast_functional_grid, unit_square_grid, Functional, GridRequest};
use crate::io::schema_comment;
use crate::model::{simulate_magnitudes, ChainRng, ObservedData, DEFAULT_TRIALS};
use crate::sampler::{derive_seed, run_chain, ModelKind, SamplerConfig};
use crate::SpatialPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Nonlinear,
    Linear,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Nonlinear => "nonlinear",
            ScenarioKind::Linear => "linear",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonlinear" => Ok(ScenarioKind::Nonlinear),
            "linear" => Ok(ScenarioKind::Linear),
            other => Err(Error::Config(format!("unknown scenario '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub n_stations: usize,
    pub n_years: usize,
    pub events_per_cell: u32,
    pub replicates: usize,
    pub grid_resolution: usize,
}

impl Default for Scenario {
    /// Desk scale: 8 replicates on a 16 × 16 grid.
    fn default() -> Self {
        Scenario {
            kind: ScenarioKind::Nonlinear,
            n_stations: 31,
            n_years: 4,
            events_per_cell: 134,
            replicates: 8,
            grid_resolution: 16,
        }
    }
}

impl Scenario {
    /// Full scale: 128 replicates on a 32 × 32 grid.
    pub fn full_scale(kind: ScenarioKind, n_stations: usize) -> Self {
        Scenario {
            kind,
            n_stations,
            replicates: 128,
            grid_resolution: 32,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_stations", self.n_stations),
            ("n_years", self.n_years),
            ("events_per_cell", self.events_per_cell as usize),
            ("replicates", self.replicates),
            ("grid_resolution", self.grid_resolution),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("scenario {name} must be positive")));
            }
        }
        if self.events_per_cell > DEFAULT_TRIALS {
            return Err(Error::Config(format!(
                "events_per_cell {} exceeds {DEFAULT_TRIALS} days",
                self.events_per_cell
            )));
        }
        Ok(())
    }
}

fn xy(s: &SpatialPoint) -> (f64, f64) {
    let c = s.coords();
    (c[0], c.get(1).copied().unwrap_or(0.0))
}

/// True log-shape surface.
pub fn true_gamma(s: &SpatialPoint, kind: ScenarioKind) -> f64 {
    let (s1, s2) = xy(s);
    match kind {
        ScenarioKind::Nonlinear => {
            let a = 2.0 * s1 - 1.0;
            let bump = 2.0 * (a - (2.0 * s2 - 1.0).abs()).exp() / (1.0 + a.exp()).powi(2);
            let dip = (8.0 / PI).sqrt() * (-(2.0 * s2 + 1.0).powi(2)).exp()
                / (1.0 + (2.0 * s1 + 1.0).powi(2));
            0.69 + 2.08 * (bump - dip)
        }
        ScenarioKind::Linear => 0.68 + 0.29 * s1 + 0.7 * s2,
    }
}

/// True log-scale surface.
pub fn true_delta(s: &SpatialPoint, kind: ScenarioKind) -> f64 {
    let (s1, s2) = xy(s);
    match kind {
        ScenarioKind::Nonlinear => (PI * s1).sin() + (PI * s2).sin(),
        ScenarioKind::Linear => 1.4 * s1 + 0.58 * s2,
    }
}

pub fn true_weibull(s: &SpatialPoint, kind: ScenarioKind) -> WeibullLogParams {
    WeibullLogParams::new(true_gamma(s, kind), true_delta(s, kind))
}

const LAYOUT_SEED: u64 = 0x5EED_1A70;

/// Stratified jittered layout of `m` stations over `[-1, 1]²`.
///
/// The square is cut into `g × g` cells with `g = ⌈√m⌉`; `m` cells are picked
/// by a seeded shuffle and each holds one point drawn uniformly from the
/// central 60% of the cell.
pub fn station_layouts(m: usize) -> Vec<SpatialPoint> {
    let g = (m as f64).sqrt().ceil() as usize;
    let width = 2.0 / g as f64;
    let mut rng = ChainRng::seed_from_u64(derive_seed(LAYOUT_SEED, m as u64));
    let mut cells: Vec<usize> = (0..g * g).collect();
    cells.shuffle(&mut rng);
    cells.truncate(m);
    cells.sort_unstable();
    cells
        .into_iter()
        .map(|c| {
            let (ix, iy) = (c % g, c / g);
            let jx = 0.2 + 0.6 * rng.random::<f64>();
            let jy = 0.2 + 0.6 * rng.random::<f64>();
            SpatialPoint::from([
                -1.0 + width * (ix as f64 + jx),
                -1.0 + width * (iy as f64 + jy),
            ])
        })
        .collect()
}

/// One synthetic dataset: `events_per_cell` events in every station-year,
/// Weibull magnitudes with the station's true parameters in every year.
pub fn generate_replicate(
    scenario: &Scenario,
    layout: &[SpatialPoint],
    seed: u64,
) -> Result<ObservedData> {
    scenario.validate()?;
    let (m, t) = (layout.len(), scenario.n_years);
    let gamma = Array2::from_shape_fn((m, t), |(i, _)| true_gamma(&layout[i], scenario.kind));
    let delta = Array2::from_shape_fn((m, t), |(i, _)| true_delta(&layout[i], scenario.kind));
    let counts = Array2::from_elem((m, t), scenario.events_per_cell);
    let mut rng = ChainRng::seed_from_u64(seed);
    simulate_magnitudes(layout, counts, &gamma, &delta, DEFAULT_TRIALS, &mut rng)
}

/// Per-pixel result of one (scenario, model) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct KlSurface {
    pub scenario: ScenarioKind,
    pub model: ModelKind,
    pub n_stations: usize,
    pub pixels: Vec<SpatialPoint>,
    /// Mean over replicates of the per-pixel posterior median KL.
    pub mean_of_medians: Vec<f64>,
    pub replicates: usize,
}

impl KlSurface {
    /// Grid average of the mean-of-medians.
    pub fn grid_mean(&self) -> f64 {
        self.mean_of_medians.iter().sum::<f64>() / self.mean_of_medians.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudySummary {
    pub surfaces: Vec<KlSurface>,
}

impl StudySummary {
    pub fn surface(&self, model: ModelKind) -> Option<&KlSurface> {
        self.surfaces.iter().find(|s| s.model == model)
    }
}

/// Seeds of replicate `r`: data, then one fit and one forecast seed per model.
fn replicate_seeds(master: u64, r: usize, model: ModelKind) -> (u64, u64, u64) {
    let base = derive_seed(master, r as u64);
    let k = match model {
        ModelKind::SemiParametric => 0,
        ModelKind::Parametric => 1,
    };
    (
        derive_seed(base, 0),
        derive_seed(base, 1 + 2 * k),
        derive_seed(base, 2 + 2 * k),
    )
}

/// Fits one model to one dataset and returns the per-pixel posterior median
/// of `KL(truth ‖ estimate)`.
pub fn replicate_kl_medians(
    data: &ObservedData,
    model: ModelKind,
    config: &SamplerConfig,
    pixels: &[SpatialPoint],
    truth: &[WeibullLogParams],
    forecast_seed: u64,
) -> Result<Vec<f64>> {
    let run = run_chain(data, config, model, &mut |_| {})?;
    let grid = forecast_functional_grid(
        &run.draws,
        &GridRequest {
            grid: pixels,
            points: data.points(),
            functional: Functional::KlVsTruth,
            n_trials: data.n_trials(),
            seed: forecast_seed,
            truth: Some(truth),
        },
    )?;
    Ok(grid.median)
}

/// Runs every (replicate, model) fit in parallel and averages the per-pixel
/// medians over replicates in replicate order. The count layer is not fitted.
pub fn run_study(
    scenario: &Scenario,
    models: &[ModelKind],
    config: &SamplerConfig,
    layout: &[SpatialPoint],
    master_seed: u64,
) -> Result<StudySummary> {
    scenario.validate()?;
    config.validate()?;
    if layout.len() != scenario.n_stations {
        return Err(Error::DimensionMismatch {
            expected: scenario.n_stations,
            found: layout.len(),
        });
    }
    let pixels = unit_square_grid(scenario.grid_resolution);
    let truth: Vec<WeibullLogParams> = pixels
        .iter()
        .map(|s| true_weibull(s, scenario.kind))
        .collect();
    let jobs: Vec<(usize, ModelKind)> = (0..scenario.replicates)
        .flat_map(|r| models.iter().map(move |&m| (r, m)))
        .collect();
    let medians: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(r, model)| -> Result<Vec<f64>> {
            let (data_seed, fit_seed, fc_seed) = replicate_seeds(master_seed, r, model);
            let data = generate_replicate(scenario, layout, data_seed)?;
            let fit = SamplerConfig {
                seed: fit_seed,
                fit_counts: false,
                ..config.clone()
            };
            let out = replicate_kl_medians(&data, model, &fit, &pixels, &truth, fc_seed)?;
            log::info!("{} replicate {r} {model} done", scenario.kind);
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let surfaces = models
        .iter()
        .map(|&model| {
            let mut sum = vec![0.0; pixels.len()];
            for ((_, m), med) in jobs.iter().zip(&medians) {
                if *m == model {
                    for (s, v) in sum.iter_mut().zip(med) {
                        *s += v;
                    }
                }
            }
            let n = scenario.replicates as f64;
            KlSurface {
                scenario: scenario.kind,
                model,
                n_stations: scenario.n_stations,
                pixels: pixels.clone(),
                mean_of_medians: sum.into_iter().map(|s| s / n).collect(),
                replicates: scenario.replicates,
            }
        })
        .collect();
    Ok(StudySummary { surfaces })
}

/// `log10(x)` for positive `x`, otherwise `None`.
pub fn log10_positive(x: f64) -> Option<f64> {
    (x > 0.0).then(|| x.log10())
}

/// Writes `scenario,model,M,pixel_x,pixel_y,mean_of_medians,log10_mean_of_medians`.
/// `pixel_x`, `pixel_y` are pixel-centre coordinates. The log column is empty
/// where the mean is not positive.
pub fn write_kl_summary<W: Write>(summary: &StudySummary, mut out: W) -> Result<()> {
    writeln!(out, "{}", schema_comment())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario",
        "model",
        "M",
        "pixel_x",
        "pixel_y",
        "mean_of_medians",
        "log10_mean_of_medians",
    ])?;
    for s in &summary.surfaces {
        for (p, v) in s.pixels.iter().zip(&s.mean_of_medians) {
            let (x, y) = xy(p);
            w.write_record([
                s.scenario.name().to_string(),
                s.model.name().to_string(),
                s.n_stations.to_string(),
                x.to_string(),
                y.to_string(),
                v.to_string(),
                log10_positive(*v)
                    .map(|l| l.to_string())
                    .unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `scenario,model,M,replicates,grid_mean_kl,log10_grid_mean_kl`.
pub fn write_model_aggregates<W: Write>(summary: &StudySummary, mut out: W) -> Result<()> {
    writeln!(out, "{}", schema_comment())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario",
        "model",
        "M",
        "replicates",
        "grid_mean_kl",
        "log10_grid_mean_kl",
    ])?;
    for s in &summary.surfaces {
        let g = s.grid_mean();
        w.write_record([
            s.scenario.name().to_string(),
            s.model.name().to_string(),
            s.n_stations.to_string(),
            s.replicates.to_string(),
            g.to_string(),
            log10_positive(g).map(|l| l.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the true surfaces on a grid as `x,y,gamma,delta`.
pub fn write_truth_grid<W: Write>(
    kind: ScenarioKind,
    pixels: &[SpatialPoint],
    mut out: W,
) -> Result<()> {
    writeln!(out, "{}", schema_comment())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "gamma", "delta"])?;
    for p in pixels {
        let (x, y) = xy(p);
        w.write_record([
            x.to_string(),
            y.to_string(),
            true_gamma(p, kind).to_string(),
            true_delta(p, kind).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a grid written by [`write_truth_grid`]: points and true parameters.
pub fn read_truth_grid(path: &Path) -> Result<(Vec<SpatialPoint>, Vec<WeibullLogParams>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x", "y", "gamma", "delta"] {
        return Err(Error::Data {
            path: path.to_path_buf(),
            line: 1,
            message: "expected the header 'x,y,gamma,delta'".into(),
        });
    }
    let (mut points, mut truth) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let v = rec
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<_>>>()
            .filter(|v| v.len() == 4)
            .ok_or_else(|| Error::Data {
                path: path.to_path_buf(),
                line,
                message: "expected four finite numbers".into(),
            })?;
        points.push(SpatialPoint::from([v[0], v[1]]));
        truth.push(WeibullLogParams::new(v[2], v[3]));
    }
    Ok((points, truth))
}
