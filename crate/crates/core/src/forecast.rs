//! Posterior-predictive draws at unobserved points and closed-form
//! functionals of the rainfall distribution.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::distributions::{sigmoid, WeibullLogParams};
use crate::error::{Error, Result};
use crate::kernel::{cross_covariance, KernelParams as Params};
use crate::model::{
    correlation_factor, linear_predictor, ChainRng, GpBlockState, Layer, PosteriorDraw,
};
use crate::sampler::splitmix64;
use crate::{CholFactor, SpatialPoint};

/// Euler–Mascheroni constant.
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Share of clamped conditional variances above which a warning is logged.
const CLAMP_WARN_RATE: f64 = 1e-3;

/// GP conditional at one target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalMoments {
    pub mean: f64,
    pub var: f64,
    /// The raw variance was negative through rounding and was set to 0.
    pub clamped: bool,
}

/// GP layer prepared for repeated conditioning at new targets.
#[derive(Debug, Clone)]
pub struct GpPredictor<'a> {
    block: &'a GpBlockState,
    points: &'a [SpatialPoint],
    corr_params: Params<f64>,
    corr: CholFactor,
    /// `R⁻¹ (μ - ψ1)`
    weights: Vec<f64>,
}

impl<'a> GpPredictor<'a> {
    pub fn new(block: &'a GpBlockState, points: &'a [SpatialPoint]) -> Result<Self> {
        let corr = correlation_factor(points, &block.lambdas)?;
        let centred: Vec<f64> = block.mu.iter().map(|m| m - block.psi).collect();
        let weights = corr.solve(&centred)?;
        Ok(GpPredictor {
            block,
            points,
            corr_params: Params::correlation(block.lambdas.clone())?,
            corr,
            weights,
        })
    }

    /// `mean = ψ + r*ᵀ R⁻¹ (μ - ψ1)`, `var = σ² (1 - r*ᵀ R⁻¹ r*)`.
    pub fn moments(&self, target: &SpatialPoint) -> Result<ConditionalMoments> {
        let r = cross_covariance(target, self.points, &self.corr_params)?;
        let mean = self.block.psi + r.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>();
        let v = self.corr.solve_lower(&r)?;
        let raw = self.block.sigma2 * (1.0 - v.iter().map(|x| x * x).sum::<f64>());
        Ok(ConditionalMoments {
            mean,
            var: raw.max(0.0),
            clamped: raw < 0.0,
        })
    }
}

/// Conditional mean and variance of the GP at `target` given its values at
/// the stations.
pub fn conditional_mu(
    target: &SpatialPoint,
    block: &GpBlockState,
    points: &[SpatialPoint],
) -> Result<ConditionalMoments> {
    GpPredictor::new(block, points)?.moments(target)
}

/// Parameters drawn at one target for one posterior draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastDraw {
    pub point: SpatialPoint,
    pub pi_star: f64,
    pub gamma_star: f64,
    pub delta_star: f64,
    pub iteration: u64,
}

impl ForecastDraw {
    pub fn weibull(&self) -> WeibullLogParams {
        WeibullLogParams::new(self.gamma_star, self.delta_star)
    }
}

/// A posterior draw prepared for forecasting at many targets.
#[derive(Debug, Clone)]
pub enum Predictor<'a> {
    SemiParametric {
        iteration: u64,
        layers: [(GpPredictor<'a>, f64); 3],
    },
    Parametric {
        iteration: u64,
        layers: [(&'a [f64], f64); 3],
    },
}

impl<'a> Predictor<'a> {
    pub fn new(draw: &'a PosteriorDraw, points: &'a [SpatialPoint]) -> Result<Self> {
        Ok(match draw {
            PosteriorDraw::SemiParametric { iteration, blocks } => {
                let prep = |b: &'a GpBlockState| -> Result<(GpPredictor<'a>, f64)> {
                    Ok((GpPredictor::new(b, points)?, b.tau2))
                };
                Predictor::SemiParametric {
                    iteration: *iteration,
                    layers: [prep(&blocks[0])?, prep(&blocks[1])?, prep(&blocks[2])?],
                }
            }
            PosteriorDraw::Parametric { iteration, blocks } => Predictor::Parametric {
                iteration: *iteration,
                layers: [
                    (&blocks[0].beta, blocks[0].tau2),
                    (&blocks[1].beta, blocks[1].tau2),
                    (&blocks[2].beta, blocks[2].tau2),
                ],
            },
        })
    }

    /// Draws `(π*, γ*, δ*)` at `target`: per layer the GP value from its
    /// conditional, then the parameter with the white-noise variance. Returns
    /// the draw and the number of clamped variances.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        target: &SpatialPoint,
        rng: &mut R,
    ) -> Result<(ForecastDraw, usize)> {
        let mut out = [0.0; 3];
        let mut clamped = 0;
        let iteration = match self {
            Predictor::SemiParametric { iteration, layers } => {
                for (slot, (gp, tau2)) in out.iter_mut().zip(layers) {
                    let m = gp.moments(target)?;
                    clamped += m.clamped as usize;
                    let z1: f64 = StandardNormal.sample(rng);
                    let z2: f64 = StandardNormal.sample(rng);
                    *slot = m.mean + m.var.sqrt() * z1 + tau2.sqrt() * z2;
                }
                *iteration
            }
            Predictor::Parametric { iteration, layers } => {
                for (slot, (beta, tau2)) in out.iter_mut().zip(layers) {
                    if beta.len() != target.dim() + 1 {
                        return Err(Error::DimensionMismatch {
                            expected: beta.len() - 1,
                            found: target.dim(),
                        });
                    }
                    let z: f64 = StandardNormal.sample(rng);
                    *slot = linear_predictor(beta, target) + tau2.sqrt() * z;
                }
                *iteration
            }
        };
        Ok((
            ForecastDraw {
                point: target.clone(),
                pi_star: out[Layer::Pi as usize],
                gamma_star: out[Layer::Gamma as usize],
                delta_star: out[Layer::Delta as usize],
                iteration,
            },
            clamped,
        ))
    }
}

/// Draws parameters at `target` for one posterior draw. Targets are treated
/// independently (marginal prediction).
pub fn draw_parameters_at<R: Rng + ?Sized>(
    target: &SpatialPoint,
    draw: &PosteriorDraw,
    points: &[SpatialPoint],
    rng: &mut R,
) -> Result<ForecastDraw> {
    Ok(Predictor::new(draw, points)?.draw(target, rng)?.0)
}

/// Mean event magnitude `e^δ Γ(1 + e^{-γ})`.
pub fn expected_event_magnitude(gamma: f64, delta: f64) -> f64 {
    (delta + ln_gamma(1.0 + (-gamma).exp())).exp()
}

/// Event magnitude variance `e^{2δ} [Γ(1 + 2e^{-γ}) - Γ(1 + e^{-γ})²]`.
pub fn event_variance(gamma: f64, delta: f64) -> f64 {
    let x = (-gamma).exp();
    let l1 = ln_gamma(1.0 + x);
    let gap = ln_gamma(1.0 + 2.0 * x) - 2.0 * l1;
    ((2.0 * (delta + l1)).exp() * gap.exp_m1()).max(0.0)
}

/// Expected yearly rainfall `n σ(π) E(W)`.
pub fn expected_annual(pi: f64, gamma: f64, delta: f64, n_trials: u32) -> f64 {
    n_trials as f64 * sigmoid(pi) * expected_event_magnitude(gamma, delta)
}

/// Expected number of wet days `n σ(π)`.
pub fn expected_wet_days(pi: f64, n_trials: u32) -> f64 {
    n_trials as f64 * sigmoid(pi)
}

/// `KL(truth ‖ estimate)` between two Weibull laws.
pub fn weibull_kl(truth: WeibullLogParams, est: WeibullLogParams) -> f64 {
    let (k1, k2) = (truth.shape(), est.shape());
    let tail = (k2 * (truth.delta - est.delta) + ln_gamma(k2 / k1 + 1.0)).exp_m1();
    let kl = truth.gamma - est.gamma + k2 * (est.delta - truth.delta)
        - EULER_GAMMA * (1.0 - k2 / k1)
        + tail;
    kl.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Functional {
    EventMean,
    EventVariance,
    AnnualMean,
    WetDays,
    KlVsTruth,
}

impl Functional {
    pub const ALL: [Functional; 5] = [
        Functional::EventMean,
        Functional::EventVariance,
        Functional::AnnualMean,
        Functional::WetDays,
        Functional::KlVsTruth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Functional::EventMean => "event-mean",
            Functional::EventVariance => "event-variance",
            Functional::AnnualMean => "annual-mean",
            Functional::WetDays => "wet-days",
            Functional::KlVsTruth => "kl-vs-truth",
        }
    }

    /// Value of the functional for one forecast draw.
    pub fn evaluate(
        self,
        d: &ForecastDraw,
        n_trials: u32,
        truth: Option<WeibullLogParams>,
    ) -> Result<f64> {
        Ok(match self {
            Functional::EventMean => expected_event_magnitude(d.gamma_star, d.delta_star),
            Functional::EventVariance => event_variance(d.gamma_star, d.delta_star),
            Functional::AnnualMean => {
                expected_annual(d.pi_star, d.gamma_star, d.delta_star, n_trials)
            }
            Functional::WetDays => expected_wet_days(d.pi_star, n_trials),
            Functional::KlVsTruth => {
                let t =
                    truth.ok_or_else(|| Error::Config("kl-vs-truth needs a truth grid".into()))?;
                weibull_kl(t, d.weibull())
            }
        })
    }
}

impl fmt::Display for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Functional {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Functional::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown functional '{s}'")))
    }
}

/// Posterior summaries of a functional over a set of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalGrid {
    pub functional: Functional,
    pub points: Vec<SpatialPoint>,
    pub median: Vec<f64>,
    pub q05: Vec<f64>,
    pub q95: Vec<f64>,
    pub n_draws: usize,
    pub clamped_variances: usize,
}

impl FunctionalGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Inputs of a grid forecast besides the draws themselves.
#[derive(Debug, Clone, Copy)]
pub struct GridRequest<'a> {
    pub grid: &'a [SpatialPoint],
    /// Station covariates the chain was fitted on.
    pub points: &'a [SpatialPoint],
    pub functional: Functional,
    pub n_trials: u32,
    pub seed: u64,
    /// True Weibull parameters per grid point, for `kl-vs-truth`.
    pub truth: Option<&'a [WeibullLogParams]>,
}

/// Stream seed for one (draw, point) pair; independent of scheduling.
pub fn forecast_seed(seed: u64, draw: usize, point: usize) -> u64 {
    splitmix64(splitmix64(seed.wrapping_add(draw as u64)).wrapping_add(point as u64))
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Evaluates a functional at every (draw, grid point) pair and summarizes
/// each point by its posterior median and 5% / 95% quantiles.
pub fn forecast_functional_grid(
    draws: &[PosteriorDraw],
    request: &GridRequest<'_>,
) -> Result<FunctionalGrid> {
    if draws.is_empty() {
        return Err(Error::Config("no posterior draws to forecast from".into()));
    }
    let grid = request.grid;
    if let Some(t) = request.truth {
        if t.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                found: t.len(),
            });
        }
    } else if request.functional == Functional::KlVsTruth {
        return Err(Error::Config("kl-vs-truth needs a truth grid".into()));
    }
    let per_draw: Vec<(Vec<f64>, usize)> = draws
        .par_iter()
        .enumerate()
        .map(|(d, draw)| -> Result<(Vec<f64>, usize)> {
            let predictor = Predictor::new(draw, request.points)?;
            let mut values = Vec::with_capacity(grid.len());
            let mut clamped = 0;
            for (g, target) in grid.iter().enumerate() {
                let mut rng = ChainRng::seed_from_u64(forecast_seed(request.seed, d, g));
                let (fd, c) = predictor.draw(target, &mut rng)?;
                clamped += c;
                let truth = request.truth.map(|t| t[g]);
                values.push(request.functional.evaluate(&fd, request.n_trials, truth)?);
            }
            Ok((values, clamped))
        })
        .collect::<Result<_>>()?;
    let clamped_variances: usize = per_draw.iter().map(|(_, c)| c).sum();
    let checks = draws.len() * grid.len() * 3;
    if clamped_variances as f64 > CLAMP_WARN_RATE * checks as f64 {
        log::warn!("{clamped_variances} of {checks} conditional variances were clamped at zero");
    }
    let mut median = Vec::with_capacity(grid.len());
    let mut q05 = Vec::with_capacity(grid.len());
    let mut q95 = Vec::with_capacity(grid.len());
    let mut column = Vec::with_capacity(draws.len());
    for g in 0..grid.len() {
        column.clear();
        column.extend(per_draw.iter().map(|(v, _)| v[g]));
        if column.iter().any(|v| v.is_nan()) {
            return Err(Error::domain(format!(
                "functional is NaN at grid point {g}"
            )));
        }
        column.sort_by(|a, b| a.total_cmp(b));
        median.push(quantile_sorted(&column, 0.5));
        q05.push(quantile_sorted(&column, 0.05));
        q95.push(quantile_sorted(&column, 0.95));
    }
    Ok(FunctionalGrid {
        functional: request.functional,
        points: grid.to_vec(),
        median,
        q05,
        q95,
        n_draws: draws.len(),
        clamped_variances,
    })
}

/// Regular `res × res` grid of pixel centres over `[-1, 1]²`.
pub fn unit_square_grid(res: usize) -> Vec<SpatialPoint> {
    let step = 2.0 / res as f64;
    let mut out = Vec::with_capacity(res * res);
    for iy in 0..res {
        for ix in 0..res {
            let x = -1.0 + step * (ix as f64 + 0.5);
            let y = -1.0 + step * (iy as f64 + 0.5);
            out.push(SpatialPoint::from([x, y]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::covariance_matrix;
    use crate::model::LinearBlock;
    use approx::assert_relative_eq;
    use ndarray::Array2;

    fn pts() -> Vec<SpatialPoint> {
        vec![
            SpatialPoint::from([0.1, -0.4]),
            SpatialPoint::from([-0.6, 0.2]),
            SpatialPoint::from([0.7, 0.8]),
        ]
    }

    fn block() -> GpBlockState {
        GpBlockState {
            psi: 0.3,
            mu: vec![1.0, -0.2, 0.6],
            field: Array2::from_elem((3, 2), 0.1),
            tau2: 0.25,
            sigma2: 1.7,
            lambdas: vec![0.9, 1.4],
            zeta_psi: 1.0,
            zeta_tau2: 1.0,
            zeta_sigma2: 1.0,
        }
    }

    #[test]
    fn conditional_at_training_point_interpolates() {
        let b = block();
        let p = pts();
        for (m, s) in p.iter().enumerate() {
            let c = conditional_mu(s, &b, &p).unwrap();
            assert_relative_eq!(c.mean, b.mu[m], epsilon = 1e-8);
            assert!(c.var <= 1e-8 * b.sigma2);
        }
    }

    #[test]
    fn conditional_far_away_reverts_to_prior() {
        let b = block();
        let c = conditional_mu(&SpatialPoint::from([400.0, -300.0]), &b, &pts()).unwrap();
        assert_relative_eq!(c.mean, b.psi, epsilon = 1e-12);
        assert_relative_eq!(c.var, b.sigma2, epsilon = 1e-12);
    }

    #[test]
    fn conditional_matches_dense_inverse() {
        let b = block();
        let p = pts();
        let target = SpatialPoint::from([0.2, 0.3]);
        let kp = crate::KernelParams::new(b.sigma2, b.lambdas.clone()).unwrap();
        let k = covariance_matrix(&p, &kp).unwrap();
        let kinv = nalgebra::DMatrix::from_fn(3, 3, |i, j| k[[i, j]])
            .try_inverse()
            .unwrap();
        let r = nalgebra::DVector::from_vec(cross_covariance(&target, &p, &kp).unwrap());
        let d = nalgebra::DVector::from_iterator(3, b.mu.iter().map(|m| m - b.psi));
        let mean = b.psi + (r.transpose() * &kinv * d)[(0, 0)];
        let var = b.sigma2 - (r.transpose() * &kinv * &r)[(0, 0)];
        let c = conditional_mu(&target, &b, &p).unwrap();
        assert_relative_eq!(c.mean, mean, epsilon = 1e-9);
        assert_relative_eq!(c.var, var, epsilon = 1e-9);
        assert!(c.var >= 0.0 && c.var <= b.sigma2);
    }

    fn gp_draw(b: GpBlockState) -> PosteriorDraw {
        PosteriorDraw::SemiParametric {
            iteration: 7,
            blocks: [b.clone(), b.clone(), b],
        }
    }

    #[test]
    fn draws_concentrate_at_station_when_noise_vanishes() {
        let mut b = block();
        b.tau2 = 1e-14;
        let p = pts();
        let d = gp_draw(b.clone());
        let mut rng = ChainRng::seed_from_u64(1);
        let f = draw_parameters_at(&p[1], &d, &p, &mut rng).unwrap();
        assert!((f.pi_star - b.mu[1]).abs() < 1e-3);
        assert_eq!(f.iteration, 7);
        let mut rng2 = ChainRng::seed_from_u64(1);
        assert_eq!(f, draw_parameters_at(&p[1], &d, &p, &mut rng2).unwrap());
    }

    #[test]
    fn far_target_variance_is_sigma2_plus_tau2() {
        let b = block();
        let p = pts();
        let d = gp_draw(b.clone());
        let pred = Predictor::new(&d, &p).unwrap();
        let target = SpatialPoint::from([50.0, 50.0]);
        let mut rng = ChainRng::seed_from_u64(2);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| pred.draw(&target, &mut rng).unwrap().0.pi_star)
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / (b.sigma2 + b.tau2) - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn parametric_draw_uses_linear_predictor() {
        let lb = LinearBlock {
            beta: vec![0.5, 1.0, -2.0],
            zeta_beta: vec![1.0; 3],
            tau2: 1e-16,
            zeta_tau2: 1.0,
            field: Array2::zeros((3, 1)),
        };
        let d = PosteriorDraw::Parametric {
            iteration: 1,
            blocks: [lb.clone(), lb.clone(), lb],
        };
        let mut rng = ChainRng::seed_from_u64(3);
        let f = draw_parameters_at(&SpatialPoint::from([0.2, 0.1]), &d, &pts(), &mut rng).unwrap();
        assert_relative_eq!(f.delta_star, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn functional_reference_values() {
        assert_relative_eq!(expected_event_magnitude(0.0, 0.0), 1.0, epsilon = 1e-14);
        assert_relative_eq!(
            expected_event_magnitude(0.0, 1.3),
            1.3f64.exp(),
            epsilon = 1e-13
        );
        assert_relative_eq!(event_variance(0.0, 0.0), 1.0, epsilon = 1e-13);
        assert_eq!(expected_annual(0.0, 0.0, 0.0, 365), 182.5);
        assert_relative_eq!(
            expected_annual(800.0, 0.0, 0.5, 365),
            365.0 * 0.5f64.exp(),
            epsilon = 1e-10
        );
        assert_eq!(expected_wet_days(0.0, 365), 182.5);
        assert_eq!(expected_wet_days(f64::INFINITY, 365), 365.0);
        for g in [-3.0, -1.0, 0.0, 2.0, 6.0] {
            assert!(event_variance(g, 0.4) >= 0.0);
            assert!(event_variance(g, 0.4).is_finite());
        }
    }

    #[test]
    fn functionals_are_monotone() {
        let mut prev = 0.0;
        for i in -20..20 {
            let pi = i as f64 * 0.3;
            let v = expected_annual(pi, 0.2, 0.1, 365);
            assert!(v > prev);
            assert!(expected_annual(0.2, 0.2, pi, 365) < expected_annual(0.2, 0.2, pi + 0.1, 365));
            prev = v;
        }
    }

    #[test]
    fn kl_identity_and_sign() {
        let a = WeibullLogParams::new(0.4, -0.3);
        assert_eq!(weibull_kl(a, a), 0.0);
        for g in [-1.0, 0.0, 0.7] {
            for d in [-1.0, 0.0, 1.5] {
                for g2 in [-1.0, 0.0, 0.7] {
                    for d2 in [-1.0, 0.0, 1.5] {
                        let (x, y) = (WeibullLogParams::new(g, d), WeibullLogParams::new(g2, d2));
                        let kl = weibull_kl(x, y);
                        assert!(kl >= 0.0);
                        assert_eq!(kl == 0.0, x == y, "{x:?} {y:?} {kl}");
                    }
                }
            }
        }
    }

    #[test]
    fn functional_names_round_trip() {
        for f in Functional::ALL {
            assert_eq!(f.name().parse::<Functional>().unwrap(), f);
        }
        assert!("annual".parse::<Functional>().is_err());
    }

    #[test]
    fn grid_of_a_constant_chain() {
        let mut b = block();
        b.tau2 = 1e-300;
        b.sigma2 = 1e-300;
        let draws = vec![gp_draw(b); 5];
        let p = pts();
        let grid = unit_square_grid(3);
        let req = GridRequest {
            grid: &grid,
            points: &p,
            functional: Functional::EventMean,
            n_trials: 365,
            seed: 9,
            truth: None,
        };
        let out = forecast_functional_grid(&draws, &req).unwrap();
        assert_eq!(out.len(), 9);
        for i in 0..9 {
            assert!(out.q05[i] <= out.median[i] && out.median[i] <= out.q95[i]);
            assert_relative_eq!(out.q05[i], out.q95[i], epsilon = 1e-9);
        }
        assert_eq!(out, forecast_functional_grid(&draws, &req).unwrap());
        let req = GridRequest {
            functional: Functional::KlVsTruth,
            ..req
        };
        assert!(forecast_functional_grid(&draws, &req).is_err());
    }

    #[test]
    fn quantiles() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&xs, 0.5), 3.0);
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_relative_eq!(quantile_sorted(&xs, 0.05), 1.2);
        assert_eq!(quantile_sorted(&[4.0], 0.95), 4.0);
    }

    #[test]
    fn grid_shape() {
        let g = unit_square_grid(4);
        assert_eq!(g.len(), 16);
        assert_eq!(g[0].coords(), &[-0.75, -0.75]);
        assert_eq!(g[15].coords(), &[0.75, 0.75]);
    }
}
