use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use super::local::{ess_cells_counts, ess_cells_magnitudes, CellPrior};
use super::semiparametric::ScanReport;
use super::{
    ess_with_loglik, gibbs_linear_beta, gibbs_zeta_psi, gibbs_zeta_variance, EllipseState,
    EssOutcome, Initialization, SamplerConfig,
};
use crate::distributions::{sample_inverse_gamma, sample_normal};
use crate::error::Result;
use crate::model::{
    empirical_fields, linear_predictor, loglik_counts, loglik_counts_kernel,
    loglik_magnitudes_unchecked, ChainRng, Layer, LinearBlock, LinearModelState, ObservedData,
    Priors,
};
use crate::SpatialPoint;

/// Coefficients and field of one linear layer, moved jointly by slice sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLatents {
    pub beta: Vec<f64>,
    pub field: Array2<f64>,
}

impl LinearLatents {
    fn of(block: &LinearBlock) -> Self {
        LinearLatents {
            beta: block.beta.clone(),
            field: block.field.clone(),
        }
    }

    fn store(self, block: &mut LinearBlock) {
        block.beta = self.beta;
        block.field = self.field;
    }

    /// `β̃_h ~ N(0, ζ_h)`, `field̃_{m,j} ~ N(x_mᵀβ̃, τ²)`.
    fn prior_draw<R: Rng + ?Sized>(
        block: &LinearBlock,
        points: &[SpatialPoint],
        rng: &mut R,
    ) -> Result<Self> {
        let beta = block
            .zeta_beta
            .iter()
            .map(|&z| sample_normal(0.0, z, rng))
            .collect::<Result<Vec<_>>>()?;
        let tau = block.tau2.sqrt();
        let (m, t) = block.field.dim();
        let mean: Vec<f64> = points.iter().map(|p| linear_predictor(&beta, p)).collect();
        let field = Array2::from_shape_fn((m, t), |(i, _)| {
            let e: f64 = StandardNormal.sample(rng);
            mean[i] + tau * e
        });
        Ok(LinearLatents { beta, field })
    }
}

impl EllipseState for LinearLatents {
    fn rotate(&self, draw: &Self, cos: f64, sin: f64) -> Self {
        LinearLatents {
            beta: self.beta.rotate(&draw.beta, cos, sin),
            field: self.field.rotate(&draw.field, cos, sin),
        }
    }
}

/// `τ² ~ IGa(k + MT/2, ζ_τ + ½ Σ (field - Xβ)²)`.
fn gibbs_linear_tau2<R: Rng + ?Sized>(
    block: &LinearBlock,
    points: &[SpatialPoint],
    priors: &Priors,
    rng: &mut R,
) -> Result<f64> {
    let mean: Vec<f64> = points
        .iter()
        .map(|p| linear_predictor(&block.beta, p))
        .collect();
    let ss: f64 = block
        .field
        .indexed_iter()
        .map(|((m, _), x)| (x - mean[m]).powi(2))
        .sum();
    let n = block.field.len() as f64;
    sample_inverse_gamma(priors.variance.k + 0.5 * n, block.zeta_tau2 + 0.5 * ss, rng)
}

pub fn initial_linear_state(
    data: &ObservedData,
    config: &SamplerConfig,
) -> Result<LinearModelState> {
    let mut rng = ChainRng::seed_from_u64(config.seed);
    let (m, t, p) = (data.n_stations(), data.n_years(), data.dim());
    let [pi_block, gamma_block, delta_block] = match config.init {
        Initialization::Zero => {
            [(); 3].map(|_| LinearBlock::initial(m, t, p, &config.priors, &mut rng))
        }
        Initialization::Empirical => empirical_fields(data)
            .map(|f| LinearBlock::from_field(f, data.points(), &config.priors, &mut rng)),
    };
    Ok(LinearModelState {
        pi_block: pi_block?,
        gamma_block: gamma_block?,
        delta_block: delta_block?,
        iteration: 0,
        rng,
    })
}

/// Full scans of the parametric competitor.
#[derive(Debug, Clone)]
pub struct ParametricSampler {
    config: SamplerConfig,
}

impl ParametricSampler {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        config.priors.validate()?;
        Ok(ParametricSampler { config })
    }

    pub fn scan(
        &mut self,
        state: &mut LinearModelState,
        data: &ObservedData,
    ) -> Result<ScanReport> {
        let priors = self.config.priors;
        let max_shrinks = self.config.max_shrinks;
        let points = data.points();
        let layers: &[Layer] = if self.config.fit_counts {
            &Layer::ALL
        } else {
            &Layer::ALL[1..]
        };
        let mut report = ScanReport::default();

        for &layer in layers {
            let rng = &mut state.rng;
            let b = match layer {
                Layer::Pi => &mut state.pi_block,
                Layer::Gamma => &mut state.gamma_block,
                Layer::Delta => &mut state.delta_block,
            };
            for h in 0..b.beta.len() {
                b.zeta_beta[h] = gibbs_zeta_psi(b.beta[h], &priors, rng)?;
            }
            b.zeta_tau2 = gibbs_zeta_variance(b.tau2, &priors, rng)?;
        }
        for &layer in layers {
            let rng = &mut state.rng;
            let b = match layer {
                Layer::Pi => &mut state.pi_block,
                Layer::Gamma => &mut state.gamma_block,
                Layer::Delta => &mut state.delta_block,
            };
            b.tau2 = gibbs_linear_tau2(b, points, &priors, rng)?;
        }

        if self.config.fit_counts {
            let b = &state.pi_block;
            let current = LinearLatents::of(b);
            let ll = loglik_counts_kernel(data, &current.field);
            let out: EssOutcome<LinearLatents> = ess_with_loglik(
                &current,
                ll,
                |r: &mut ChainRng| LinearLatents::prior_draw(b, points, r),
                |x: &LinearLatents| loglik_counts_kernel(data, &x.field),
                &mut state.rng,
                max_shrinks,
            )?;
            report.shrinks.push(out.n_shrinks);
            report.loglik_counts = Some(loglik_counts(data, &out.state.field)?);
            out.state.store(&mut state.pi_block);
        }

        let (g, d) = (&state.gamma_block, &state.delta_block);
        let current = (LinearLatents::of(g), LinearLatents::of(d));
        let ll = loglik_magnitudes_unchecked(data, &current.0.field, &current.1.field);
        let out = ess_with_loglik(
            &current,
            ll,
            |r: &mut ChainRng| {
                Ok((
                    LinearLatents::prior_draw(g, points, r)?,
                    LinearLatents::prior_draw(d, points, r)?,
                ))
            },
            |x: &(LinearLatents, LinearLatents)| {
                loglik_magnitudes_unchecked(data, &x.0.field, &x.1.field)
            },
            &mut state.rng,
            max_shrinks,
        )?;
        report.shrinks.push(out.n_shrinks);
        report.loglik_magnitudes = out.loglik;
        let (gl, dl) = out.state;
        gl.store(&mut state.gamma_block);
        dl.store(&mut state.delta_block);

        if self.config.local_updates {
            let centres = |b: &LinearBlock| -> Vec<f64> {
                points
                    .iter()
                    .map(|p| linear_predictor(&b.beta, p))
                    .collect()
            };
            if self.config.fit_counts {
                let c = centres(&state.pi_block);
                let b = &mut state.pi_block;
                report.cells.merge(ess_cells_counts(
                    data,
                    &mut b.field,
                    &c,
                    b.tau2,
                    &mut state.rng,
                    max_shrinks,
                )?);
                report.loglik_counts = Some(loglik_counts(data, &b.field)?);
            }
            let (cg, cd) = (centres(&state.gamma_block), centres(&state.delta_block));
            let (g, d) = (&mut state.gamma_block, &mut state.delta_block);
            report.cells.merge(ess_cells_magnitudes(
                data,
                &mut g.field,
                &mut d.field,
                CellPrior {
                    centres: &cg,
                    tau2: g.tau2,
                },
                CellPrior {
                    centres: &cd,
                    tau2: d.tau2,
                },
                &mut state.rng,
                max_shrinks,
            )?);
            report.loglik_magnitudes = loglik_magnitudes_unchecked(data, &g.field, &d.field);
            for &layer in layers {
                let rng = &mut state.rng;
                let b = match layer {
                    Layer::Pi => &mut state.pi_block,
                    Layer::Gamma => &mut state.gamma_block,
                    Layer::Delta => &mut state.delta_block,
                };
                b.beta = gibbs_linear_beta(b, points, rng)?;
            }
        }

        state.iteration += 1;
        Ok(report)
    }
}

/// Applies one parametric scan to a copy of `state`.
pub fn full_scan_parametric(
    state: &LinearModelState,
    data: &ObservedData,
    config: &SamplerConfig,
) -> Result<LinearModelState> {
    let mut next = state.clone();
    ParametricSampler::new(config.clone())?.scan(&mut next, data)?;
    Ok(next)
}
