use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::parametric::{initial_linear_state, ParametricSampler};
use super::semiparametric::{initial_chain_state, SemiParametricSampler};
use super::SamplerConfig;
use crate::error::{Error, Result};
use crate::model::{ChainState, Layer, LinearModelState, ObservedData, PosteriorDraw};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    SemiParametric,
    Parametric,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SemiParametric => "semiparametric",
            ModelKind::Parametric => "parametric",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semiparametric" => Ok(ModelKind::SemiParametric),
            "parametric" => Ok(ModelKind::Parametric),
            other => Err(Error::Config(format!("unknown model '{other}'"))),
        }
    }
}

/// Complete sampler state of either model, including the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AnyState {
    SemiParametric(ChainState),
    Parametric(LinearModelState),
}

impl AnyState {
    pub fn initial(model: ModelKind, data: &ObservedData, config: &SamplerConfig) -> Result<Self> {
        Ok(match model {
            ModelKind::SemiParametric => {
                AnyState::SemiParametric(initial_chain_state(data, config)?)
            }
            ModelKind::Parametric => AnyState::Parametric(initial_linear_state(data, config)?),
        })
    }

    pub fn model(&self) -> ModelKind {
        match self {
            AnyState::SemiParametric(_) => ModelKind::SemiParametric,
            AnyState::Parametric(_) => ModelKind::Parametric,
        }
    }

    pub fn iteration(&self) -> u64 {
        match self {
            AnyState::SemiParametric(s) => s.iteration,
            AnyState::Parametric(s) => s.iteration,
        }
    }

    pub fn draw(&self) -> PosteriorDraw {
        match self {
            AnyState::SemiParametric(s) => PosteriorDraw::from_chain(s),
            AnyState::Parametric(s) => PosteriorDraw::from_linear(s),
        }
    }

    /// Every coordinate moved by a slice update, in a fixed order.
    fn slice_coordinates(&self, layers: &[Layer], out: &mut Vec<f64>) {
        out.clear();
        for &layer in layers {
            match self {
                AnyState::SemiParametric(s) => {
                    let b = s.block(layer);
                    out.extend(&b.lambdas);
                    out.push(b.psi);
                    out.extend(&b.mu);
                    out.extend(b.field.iter());
                }
                AnyState::Parametric(s) => {
                    let b = s.block(layer);
                    out.extend(&b.beta);
                    out.extend(b.field.iter());
                }
            }
        }
    }
}

/// Per-scan information passed to the progress hook.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanProgress {
    pub iteration: u64,
    pub loglik_counts: Option<f64>,
    pub loglik_magnitudes: f64,
    pub shrinks: Vec<usize>,
}

/// Summary of the slice updates of a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub n_scans: u64,
    pub n_slice_updates: u64,
    pub total_shrinks: u64,
    pub max_shrinks_seen: usize,
    /// Coordinates moved by a slice update that compared equal to their
    /// previous value. Zero for a rejection-free sampler.
    pub repeated_coordinates: u64,
    /// Per-cell slice updates (zero when they are switched off).
    pub n_cell_updates: u64,
    pub total_cell_shrinks: u64,
    pub max_cell_shrinks_seen: usize,
}

impl ChainDiagnostics {
    pub fn mean_shrinks(&self) -> f64 {
        if self.n_slice_updates == 0 {
            0.0
        } else {
            self.total_shrinks as f64 / self.n_slice_updates as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRun {
    pub draws: Vec<PosteriorDraw>,
    pub state: AnyState,
    pub diagnostics: ChainDiagnostics,
}

/// Runs a chain from its initial state.
pub fn run_chain(
    data: &ObservedData,
    config: &SamplerConfig,
    model: ModelKind,
    progress: &mut dyn FnMut(&ScanProgress),
) -> Result<ChainRun> {
    config.validate()?;
    let state = AnyState::initial(model, data, config)?;
    continue_chain(
        data,
        config,
        state,
        Vec::new(),
        ChainDiagnostics::default(),
        progress,
    )
}

/// Continues a chain from a saved state up to `config.n_iterations` scans.
pub fn continue_chain(
    data: &ObservedData,
    config: &SamplerConfig,
    state: AnyState,
    draws: Vec<PosteriorDraw>,
    diagnostics: ChainDiagnostics,
    progress: &mut dyn FnMut(&ScanProgress),
) -> Result<ChainRun> {
    advance_chain(
        data,
        config,
        ChainRun {
            draws,
            state,
            diagnostics,
        },
        config.n_iterations,
        progress,
    )
}

/// Continues a chain up to scan `until` (at most `config.n_iterations`).
/// Stopping early and advancing again gives the same chain as one call.
pub fn advance_chain(
    data: &ObservedData,
    config: &SamplerConfig,
    run: ChainRun,
    until: u64,
    progress: &mut dyn FnMut(&ScanProgress),
) -> Result<ChainRun> {
    let ChainRun {
        mut draws,
        mut state,
        mut diagnostics,
    } = run;
    let until = until.min(config.n_iterations);
    config.validate()?;
    if state.iteration() > config.n_iterations {
        return Err(Error::Config(format!(
            "saved state is at iteration {} beyond the requested {}",
            state.iteration(),
            config.n_iterations
        )));
    }
    let layers: &[Layer] = if config.fit_counts {
        &Layer::ALL
    } else {
        &Layer::ALL[1..]
    };
    let mut semi = SemiParametricSampler::new(config.clone())?;
    let mut para = ParametricSampler::new(config.clone())?;
    let (mut before, mut after) = (Vec::new(), Vec::new());
    state.slice_coordinates(layers, &mut before);
    while state.iteration() < until {
        let report = match &mut state {
            AnyState::SemiParametric(s) => semi.scan(s, data)?,
            AnyState::Parametric(s) => para.scan(s, data)?,
        };
        state.slice_coordinates(layers, &mut after);
        diagnostics.repeated_coordinates +=
            before.iter().zip(&after).filter(|(a, b)| a == b).count() as u64;
        std::mem::swap(&mut before, &mut after);
        diagnostics.n_scans += 1;
        diagnostics.n_slice_updates += report.shrinks.len() as u64;
        diagnostics.total_shrinks += report.shrinks.iter().sum::<usize>() as u64;
        diagnostics.max_shrinks_seen = diagnostics
            .max_shrinks_seen
            .max(report.shrinks.iter().copied().max().unwrap_or(0));
        diagnostics.n_cell_updates += report.cells.updates as u64;
        diagnostics.total_cell_shrinks += report.cells.total as u64;
        diagnostics.max_cell_shrinks_seen = diagnostics.max_cell_shrinks_seen.max(report.cells.max);
        let iteration = state.iteration();
        if config.is_stored(iteration) {
            draws.push(state.draw());
        }
        progress(&ScanProgress {
            iteration,
            loglik_counts: report.loglik_counts,
            loglik_magnitudes: report.loglik_magnitudes,
            shrinks: report.shrinks,
        });
    }
    Ok(ChainRun {
        draws,
        state,
        diagnostics,
    })
}
