use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use super::local::{ess_cells_counts, ess_cells_magnitudes, CellPrior, ShrinkTally};
use super::{
    ess_with_loglik, gibbs_gp_mean, gibbs_psi, gibbs_sigma2_with, gibbs_tau2, gibbs_zeta_psi,
    gibbs_zeta_variance, printed_sigma2, printed_tau2, EllipseState, EssOutcome, Initialization,
    SamplerConfig, Step2Conditionals,
};
use crate::distributions::sample_normal;
use crate::error::Result;
use crate::kernel::mvn_logpdf;
use crate::model::{
    correlation_factor, empirical_fields, loglik_counts_kernel, loglik_magnitudes_unchecked,
    ChainRng, ChainState, GpBlockState, Layer, ObservedData, Priors,
};
use crate::{CholFactor, SpatialPoint};

/// The part of a GP layer moved by elliptical slice sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct GpLatents {
    pub psi: f64,
    pub mu: Vec<f64>,
    pub field: Array2<f64>,
}

impl GpLatents {
    pub fn of(block: &GpBlockState) -> Self {
        GpLatents {
            psi: block.psi,
            mu: block.mu.clone(),
            field: block.field.clone(),
        }
    }

    fn store(self, block: &mut GpBlockState) {
        block.psi = self.psi;
        block.mu = self.mu;
        block.field = self.field;
    }

    /// `ψ̃ ~ N(0, ζ_ψ)`, `μ̃ ~ N(ψ̃ 1, K)`, `field̃_{m,j} ~ N(μ̃_m, τ²)`.
    fn prior_draw<R: Rng + ?Sized>(
        block: &GpBlockState,
        cov: &CholFactor,
        rng: &mut R,
    ) -> Result<Self> {
        let (m, t) = block.field.dim();
        let psi = sample_normal(0.0, block.zeta_psi, rng)?;
        let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
        let mu: Vec<f64> = cov.mul_lower(&z)?.into_iter().map(|v| psi + v).collect();
        let tau = block.tau2.sqrt();
        let field = Array2::from_shape_fn((m, t), |(i, _)| {
            let e: f64 = StandardNormal.sample(rng);
            mu[i] + tau * e
        });
        Ok(GpLatents { psi, mu, field })
    }
}

impl EllipseState for GpLatents {
    fn rotate(&self, draw: &Self, cos: f64, sin: f64) -> Self {
        GpLatents {
            psi: self.psi.rotate(&draw.psi, cos, sin),
            mu: self.mu.rotate(&draw.mu, cos, sin),
            field: self.field.rotate(&draw.field, cos, sin),
        }
    }
}

/// Length-scale update on the log scale. The state is `log λ` with prior
/// `N(0, v)` per dimension; the likelihood is `N(μ; ψ1, σ² R(λ))`. A proposal
/// whose covariance cannot be factorized counts as `-∞`.
///
/// `current_corr` is the correlation factor at the current length scales, if
/// known. Returns the accepted `λ` and the correlation factor there.
pub fn ess_lengthscales<R: Rng + ?Sized>(
    block: &GpBlockState,
    points: &[SpatialPoint],
    priors: &Priors,
    current_corr: Option<&CholFactor>,
    rng: &mut R,
    max_shrinks: usize,
) -> Result<(EssOutcome<Vec<f64>>, CholFactor)> {
    let mean = vec![block.psi; block.mu.len()];
    let sd = block.sigma2.sqrt();
    let current_corr = match current_corr {
        Some(c) => c.clone(),
        None => correlation_factor(points, &block.lambdas)?,
    };
    let current_ll = mvn_logpdf(&block.mu, &mean, &current_corr.scaled(sd))?;
    let log_lambda: Vec<f64> = block.lambdas.iter().map(|l| l.ln()).collect();
    let v = priors.log_lengthscale_var;
    let mut last: Option<CholFactor> = None;
    let out = ess_with_loglik(
        &log_lambda,
        current_ll,
        |r: &mut R| {
            (0..log_lambda.len())
                .map(|_| sample_normal(0.0, v, r))
                .collect()
        },
        |ll: &Vec<f64>| {
            let lambdas: Vec<f64> = ll.iter().map(|x| x.exp()).collect();
            let Ok(corr) = correlation_factor(points, &lambdas) else {
                return f64::NEG_INFINITY;
            };
            let value = mvn_logpdf(&block.mu, &mean, &corr.scaled(sd)).unwrap_or(f64::NEG_INFINITY);
            last = Some(corr);
            value
        },
        rng,
        max_shrinks,
    )?;
    let corr = last.expect("an accepted proposal was evaluated");
    let EssOutcome {
        state,
        loglik,
        n_shrinks,
        final_angle,
    } = out;
    Ok((
        EssOutcome {
            state: state.into_iter().map(f64::exp).collect(),
            loglik,
            n_shrinks,
            final_angle,
        },
        corr,
    ))
}

/// Elliptical slice update of `(ψ, μ, field)` of the count layer against the
/// binomial likelihood. `cov` is the Cholesky factor of `K(σ², λ)`.
pub fn ess_block_counts<R: Rng + ?Sized>(
    block: &GpBlockState,
    data: &ObservedData,
    cov: &CholFactor,
    rng: &mut R,
    max_shrinks: usize,
) -> Result<EssOutcome<GpLatents>> {
    let current = GpLatents::of(block);
    let ll = loglik_counts_kernel(data, &current.field);
    ess_with_loglik(
        &current,
        ll,
        |r: &mut R| GpLatents::prior_draw(block, cov, r),
        |x: &GpLatents| loglik_counts_kernel(data, &x.field),
        rng,
        max_shrinks,
    )
}

/// Joint elliptical slice update of the shape and scale layers against the
/// Weibull likelihood. Each layer gets its own prior draw; both move along
/// the ellipse with the same angle.
pub fn ess_block_magnitudes<R: Rng + ?Sized>(
    gamma: &GpBlockState,
    delta: &GpBlockState,
    data: &ObservedData,
    gamma_cov: &CholFactor,
    delta_cov: &CholFactor,
    rng: &mut R,
    max_shrinks: usize,
) -> Result<EssOutcome<(GpLatents, GpLatents)>> {
    let current = (GpLatents::of(gamma), GpLatents::of(delta));
    let ll = loglik_magnitudes_unchecked(data, &current.0.field, &current.1.field);
    ess_with_loglik(
        &current,
        ll,
        |r: &mut R| {
            let g = GpLatents::prior_draw(gamma, gamma_cov, r)?;
            let d = GpLatents::prior_draw(delta, delta_cov, r)?;
            Ok((g, d))
        },
        |x: &(GpLatents, GpLatents)| loglik_magnitudes_unchecked(data, &x.0.field, &x.1.field),
        rng,
        max_shrinks,
    )
}

/// Starting state of the semi-parametric chain for a dataset and seed.
pub fn initial_chain_state(data: &ObservedData, config: &SamplerConfig) -> Result<ChainState> {
    let mut rng = ChainRng::seed_from_u64(config.seed);
    let (m, t, p) = (data.n_stations(), data.n_years(), data.dim());
    let [pi_block, gamma_block, delta_block] = match config.init {
        Initialization::Zero => {
            [(); 3].map(|_| GpBlockState::initial(m, t, p, &config.priors, &mut rng))
        }
        Initialization::Empirical => {
            empirical_fields(data).map(|f| GpBlockState::from_field(f, p, &config.priors, &mut rng))
        }
    };
    let (pi_block, gamma_block, delta_block) = (pi_block?, gamma_block?, delta_block?);
    Ok(ChainState {
        pi_block,
        gamma_block,
        delta_block,
        iteration: 0,
        rng,
    })
}

/// Per-scan bookkeeping.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScanReport {
    /// Shrink counts of every slice update in scan order.
    pub shrinks: Vec<usize>,
    pub loglik_counts: Option<f64>,
    pub loglik_magnitudes: f64,
    /// Per-cell updates, when enabled.
    pub cells: ShrinkTally,
}

/// Runs full scans while caching the correlation factor of every layer.
#[derive(Debug, Clone)]
pub struct SemiParametricSampler {
    config: SamplerConfig,
    corr: [Option<(Vec<f64>, CholFactor)>; 3],
}

impl SemiParametricSampler {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        config.priors.validate()?;
        Ok(SemiParametricSampler {
            config,
            corr: [None, None, None],
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    fn layers(&self) -> &'static [Layer] {
        if self.config.fit_counts {
            &Layer::ALL
        } else {
            &Layer::ALL[1..]
        }
    }

    fn corr(
        &mut self,
        layer: Layer,
        points: &[SpatialPoint],
        lambdas: &[f64],
    ) -> Result<CholFactor> {
        let slot = &mut self.corr[layer as usize];
        if let Some((cached, f)) = slot {
            if cached.as_slice() == lambdas {
                return Ok(f.clone());
            }
        }
        let f = correlation_factor(points, lambdas)?;
        *slot = Some((lambdas.to_vec(), f.clone()));
        Ok(f)
    }

    /// One full scan: auxiliary scales, variances, length scales, then the
    /// count layer and the joint magnitude layers.
    pub fn scan(&mut self, state: &mut ChainState, data: &ObservedData) -> Result<ScanReport> {
        let priors = self.config.priors;
        let max_shrinks = self.config.max_shrinks;
        let points = data.points();
        let layers = self.layers();
        let mut report = ScanReport::default();

        for &layer in layers {
            let rng = &mut state.rng;
            let b = match layer {
                Layer::Pi => &mut state.pi_block,
                Layer::Gamma => &mut state.gamma_block,
                Layer::Delta => &mut state.delta_block,
            };
            b.zeta_psi = gibbs_zeta_psi(b.psi, &priors, rng)?;
            b.zeta_tau2 = gibbs_zeta_variance(b.tau2, &priors, rng)?;
            b.zeta_sigma2 = gibbs_zeta_variance(b.sigma2, &priors, rng)?;
        }

        for &layer in layers {
            let lambdas = state.block(layer).lambdas.clone();
            let corr = self.corr(layer, points, &lambdas)?;
            let rng = &mut state.rng;
            let b = match layer {
                Layer::Pi => &mut state.pi_block,
                Layer::Gamma => &mut state.gamma_block,
                Layer::Delta => &mut state.delta_block,
            };
            match self.config.step2 {
                Step2Conditionals::Exact => {
                    b.tau2 = gibbs_tau2(b, &priors, rng)?;
                    b.sigma2 = gibbs_sigma2_with(b, &corr, &priors, rng)?;
                }
                Step2Conditionals::Printed => {
                    b.tau2 = printed_tau2(b, &priors, rng)?;
                    b.sigma2 = printed_sigma2(b, &priors, rng)?;
                }
            }
        }

        for &layer in layers {
            let lambdas = state.block(layer).lambdas.clone();
            let corr = self.corr(layer, points, &lambdas)?;
            let rng = &mut state.rng;
            let b = match layer {
                Layer::Pi => &mut state.pi_block,
                Layer::Gamma => &mut state.gamma_block,
                Layer::Delta => &mut state.delta_block,
            };
            let (out, new_corr) =
                ess_lengthscales(b, points, &priors, Some(&corr), rng, max_shrinks)?;
            report.shrinks.push(out.n_shrinks);
            b.lambdas = out.state;
            self.corr[layer as usize] = Some((b.lambdas.clone(), new_corr));
        }

        if self.config.fit_counts {
            let b = &state.pi_block;
            let cov = self
                .corr(Layer::Pi, points, &b.lambdas)?
                .scaled(b.sigma2.sqrt());
            let out = ess_block_counts(b, data, &cov, &mut state.rng, max_shrinks)?;
            report.shrinks.push(out.n_shrinks);
            report.loglik_counts = Some(crate::model::loglik_counts(data, &out.state.field)?);
            out.state.store(&mut state.pi_block);
        }

        let g_cov = self
            .corr(Layer::Gamma, points, &state.gamma_block.lambdas)?
            .scaled(state.gamma_block.sigma2.sqrt());
        let d_cov = self
            .corr(Layer::Delta, points, &state.delta_block.lambdas)?
            .scaled(state.delta_block.sigma2.sqrt());
        let out = ess_block_magnitudes(
            &state.gamma_block,
            &state.delta_block,
            data,
            &g_cov,
            &d_cov,
            &mut state.rng,
            max_shrinks,
        )?;
        report.shrinks.push(out.n_shrinks);
        report.loglik_magnitudes = out.loglik;
        let (g, d) = out.state;
        g.store(&mut state.gamma_block);
        d.store(&mut state.delta_block);

        if self.config.local_updates {
            if self.config.fit_counts {
                let b = &mut state.pi_block;
                report.cells.merge(ess_cells_counts(
                    data,
                    &mut b.field,
                    &b.mu,
                    b.tau2,
                    &mut state.rng,
                    max_shrinks,
                )?);
                report.loglik_counts = Some(crate::model::loglik_counts(data, &b.field)?);
            }
            let (g, d) = (&mut state.gamma_block, &mut state.delta_block);
            report.cells.merge(ess_cells_magnitudes(
                data,
                &mut g.field,
                &mut d.field,
                CellPrior {
                    centres: &g.mu,
                    tau2: g.tau2,
                },
                CellPrior {
                    centres: &d.mu,
                    tau2: d.tau2,
                },
                &mut state.rng,
                max_shrinks,
            )?);
            report.loglik_magnitudes = loglik_magnitudes_unchecked(data, &g.field, &d.field);
            for &layer in layers {
                let lambdas = state.block(layer).lambdas.clone();
                let corr = self.corr(layer, points, &lambdas)?;
                let rng = &mut state.rng;
                let b = match layer {
                    Layer::Pi => &mut state.pi_block,
                    Layer::Gamma => &mut state.gamma_block,
                    Layer::Delta => &mut state.delta_block,
                };
                b.mu = gibbs_gp_mean(b, &corr, rng)?;
                b.psi = gibbs_psi(b, &corr, rng)?;
            }
        }

        state.iteration += 1;
        Ok(report)
    }
}

/// Applies one full scan to a copy of `state`.
pub fn full_scan(
    state: &ChainState,
    data: &ObservedData,
    config: &SamplerConfig,
) -> Result<ChainState> {
    let mut next = state.clone();
    SemiParametricSampler::new(config.clone())?.scan(&mut next, data)?;
    Ok(next)
}
