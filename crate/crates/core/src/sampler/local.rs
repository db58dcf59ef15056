//! Per-cell slice updates of the year-level fields.
//!
//! Given the station centres and `τ²`, the cells of a field are independent
//! a priori and the likelihood factorizes over cells, so each cell can be
//! moved by its own one- or two-dimensional elliptical slice update.

use ndarray::Array2;
use rand::Rng;

use super::ess_with_loglik;
use crate::distributions::sample_normal;
use crate::error::Result;
use crate::model::{cell_loglik_counts, cell_loglik_magnitudes, ObservedData};

/// Shrink counts of a batch of per-cell updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ShrinkTally {
    pub updates: usize,
    pub total: usize,
    pub max: usize,
}

impl ShrinkTally {
    fn add(&mut self, n: usize) {
        self.updates += 1;
        self.total += n;
        self.max = self.max.max(n);
    }

    pub fn merge(&mut self, other: ShrinkTally) {
        self.updates += other.updates;
        self.total += other.total;
        self.max = self.max.max(other.max);
    }
}

/// Updates every cell of the count field. `centres[m]` is the prior mean of
/// station `m`.
pub(crate) fn ess_cells_counts<R: Rng + ?Sized>(
    data: &ObservedData,
    field: &mut Array2<f64>,
    centres: &[f64],
    tau2: f64,
    rng: &mut R,
    max_shrinks: usize,
) -> Result<ShrinkTally> {
    let mut shrinks = ShrinkTally::default();
    let (m, t) = field.dim();
    for i in 0..m {
        for j in 0..t {
            let c = centres[i];
            let x = field[[i, j]] - c;
            let ll = cell_loglik_counts(data, i, j, c + x);
            let out = ess_with_loglik(
                &x,
                ll,
                |r: &mut R| sample_normal(0.0, tau2, r),
                |y: &f64| cell_loglik_counts(data, i, j, c + y),
                rng,
                max_shrinks,
            )?;
            field[[i, j]] = c + out.state;
            shrinks.add(out.n_shrinks);
        }
    }
    Ok(shrinks)
}

/// Prior mean and white-noise variance of one magnitude field.
pub(crate) struct CellPrior<'a> {
    pub centres: &'a [f64],
    pub tau2: f64,
}

/// Updates every `(γ, δ)` cell pair jointly with a shared angle.
pub(crate) fn ess_cells_magnitudes<R: Rng + ?Sized>(
    data: &ObservedData,
    gamma: &mut Array2<f64>,
    delta: &mut Array2<f64>,
    gp: CellPrior<'_>,
    dp: CellPrior<'_>,
    rng: &mut R,
    max_shrinks: usize,
) -> Result<ShrinkTally> {
    let mut shrinks = ShrinkTally::default();
    let (m, t) = gamma.dim();
    for i in 0..m {
        for j in 0..t {
            let (cg, cd) = (gp.centres[i], dp.centres[i]);
            let x = (gamma[[i, j]] - cg, delta[[i, j]] - cd);
            let ll = cell_loglik_magnitudes(data, i, j, cg + x.0, cd + x.1);
            let out = ess_with_loglik(
                &x,
                ll,
                |r: &mut R| {
                    Ok((
                        sample_normal(0.0, gp.tau2, r)?,
                        sample_normal(0.0, dp.tau2, r)?,
                    ))
                },
                |y: &(f64, f64)| cell_loglik_magnitudes(data, i, j, cg + y.0, cd + y.1),
                rng,
                max_shrinks,
            )?;
            gamma[[i, j]] = cg + out.state.0;
            delta[[i, j]] = cd + out.state.1;
            shrinks.add(out.n_shrinks);
        }
    }
    Ok(shrinks)
}
