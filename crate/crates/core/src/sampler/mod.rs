//! Gibbs and elliptical slice sampling updates, full scans for both models,
//! the chain driver and the joint-distribution correctness test.

use std::f64::consts::TAU;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distributions::{sample_gamma, sample_inverse_gamma, sample_normal};
use crate::error::{Error, Result};
use crate::kernel::cholesky_jittered;
use crate::model::{correlation_factor, GpBlockState, LinearBlock, Priors};
use crate::{CholFactor, SpatialPoint};

mod chain;
pub mod geweke;
mod local;

pub use local::ShrinkTally;
mod parametric;
mod semiparametric;

pub use chain::{
    advance_chain, continue_chain, run_chain, AnyState, ChainDiagnostics, ChainRun, ModelKind,
    ScanProgress,
};
pub use parametric::{
    full_scan_parametric, initial_linear_state, LinearLatents, ParametricSampler,
};
pub use semiparametric::{
    ess_block_counts, ess_block_magnitudes, ess_lengthscales, full_scan, initial_chain_state,
    GpLatents, ScanReport, SemiParametricSampler,
};

/// Default bound on bracket shrinks within one elliptical slice update.
pub const DEFAULT_MAX_SHRINKS: usize = 1000;

/// Which conditionals to use for the two variances of a GP layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Step2Conditionals {
    /// The conjugate conditionals implied by the hierarchy.
    #[default]
    Exact,
    /// The transposed forms as printed in the original description of the
    /// scheme. Kept only so the correctness test can show that they fail.
    Printed,
}

/// Starting point of a chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Initialization {
    /// Fields at per-cell moment estimates, hierarchy fitted to them.
    #[default]
    Empirical,
    /// `ψ = 0`, `μ = 0`, fields `= 0`, `τ² = σ² = 1`, `λ = 1`.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub seed: u64,
    pub priors: Priors,
    pub max_shrinks: usize,
    /// Update the count layer. The simulation study treats counts as fixed.
    pub fit_counts: bool,
    pub step2: Step2Conditionals,
    pub init: Initialization,
    /// After the block slice updates, move every field cell by its own slice
    /// update and redraw `μ`, `ψ` (or `β`) from their conjugate Gaussian
    /// conditionals. Set to false for the block updates alone.
    pub local_updates: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_iterations: 2000,
            burn_in: 500,
            thin: 1,
            seed: 1,
            priors: Priors::default(),
            max_shrinks: DEFAULT_MAX_SHRINKS,
            fit_counts: true,
            step2: Step2Conditionals::Exact,
            init: Initialization::Empirical,
            local_updates: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iterations {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than n_iterations ({})",
                self.burn_in, self.n_iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.max_shrinks == 0 {
            return Err(Error::Config("max_shrinks must be at least 1".into()));
        }
        self.priors.validate()
    }

    /// Number of stored draws, `(n_iterations - burn_in) / thin`.
    pub fn n_stored(&self) -> u64 {
        (self.n_iterations - self.burn_in) / self.thin
    }

    /// Whether the draw after scan `iteration` (1-based) is kept.
    pub fn is_stored(&self, iteration: u64) -> bool {
        iteration > self.burn_in
            && (iteration - self.burn_in) % self.thin == 0
            && (iteration - self.burn_in) / self.thin <= self.n_stored()
    }
}

/// 64-bit finalizer used to derive independent stream seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of stream `index` derived from `master`: `splitmix64(master + index)`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master.wrapping_add(index))
}

/// A state that can be moved along an ellipse `x cos α + ν sin α`.
pub trait EllipseState: Clone {
    fn rotate(&self, draw: &Self, cos: f64, sin: f64) -> Self;
}

impl EllipseState for f64 {
    fn rotate(&self, draw: &Self, cos: f64, sin: f64) -> Self {
        self * cos + draw * sin
    }
}

impl EllipseState for Vec<f64> {
    fn rotate(&self, draw: &Self, cos: f64, sin: f64) -> Self {
        self.iter()
            .zip(draw)
            .map(|(x, d)| x * cos + d * sin)
            .collect()
    }
}

impl EllipseState for Array2<f64> {
    fn rotate(&self, draw: &Self, cos: f64, sin: f64) -> Self {
        let mut out = self * cos;
        out.scaled_add(sin, draw);
        out
    }
}

impl<A: EllipseState, B: EllipseState> EllipseState for (A, B) {
    fn rotate(&self, draw: &Self, cos: f64, sin: f64) -> Self {
        (
            self.0.rotate(&draw.0, cos, sin),
            self.1.rotate(&draw.1, cos, sin),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EssOutcome<T> {
    pub state: T,
    pub loglik: f64,
    pub n_shrinks: usize,
    pub final_angle: f64,
}

/// Elliptical slice sampling for a zero-mean Gaussian prior.
///
/// Draws `α ~ U(0, 2π)`, brackets `[α - 2π, α]`, sets the threshold
/// `y = loglik(current) + ln u`, takes one prior draw and walks the ellipse,
/// shrinking the bracket towards 0 until a proposal clears the threshold.
/// Proposals with a log-likelihood of `-∞` or NaN are never accepted.
pub fn ess_generic<T, R, D, L>(
    current: &T,
    prior_draw: D,
    mut loglik: L,
    rng: &mut R,
    max_shrinks: usize,
) -> Result<EssOutcome<T>>
where
    T: EllipseState,
    R: Rng + ?Sized,
    D: FnOnce(&mut R) -> Result<T>,
    L: FnMut(&T) -> f64,
{
    let current_ll = loglik(current);
    ess_with_loglik(current, current_ll, prior_draw, loglik, rng, max_shrinks)
}

/// As [`ess_generic`] with the current log-likelihood supplied by the caller.
pub fn ess_with_loglik<T, R, D, L>(
    current: &T,
    current_ll: f64,
    prior_draw: D,
    mut loglik: L,
    rng: &mut R,
    max_shrinks: usize,
) -> Result<EssOutcome<T>>
where
    T: EllipseState,
    R: Rng + ?Sized,
    D: FnOnce(&mut R) -> Result<T>,
    L: FnMut(&T) -> f64,
{
    if !current_ll.is_finite() {
        return Err(Error::domain(format!(
            "log-likelihood at the current state is {current_ll}"
        )));
    }
    let mut alpha = rng.random::<f64>() * TAU;
    let (mut lo, mut hi) = (alpha - TAU, alpha);
    let u: f64 = rng.random();
    let threshold = current_ll + (1.0 - u).ln();
    let draw = prior_draw(rng)?;
    let mut n_shrinks = 0;
    loop {
        let proposal = current.rotate(&draw, alpha.cos(), alpha.sin());
        let ll = loglik(&proposal);
        if ll > f64::NEG_INFINITY && ll >= threshold {
            return Ok(EssOutcome {
                state: proposal,
                loglik: ll,
                n_shrinks,
                final_angle: alpha,
            });
        }
        if n_shrinks >= max_shrinks {
            return Err(Error::ShrinkLimit {
                max_shrinks,
                context: "elliptical slice",
            });
        }
        let width = hi - lo;
        if alpha < 0.0 {
            lo = alpha;
        } else {
            hi = alpha;
        }
        assert!(
            lo <= 0.0 && hi >= 0.0 && hi - lo <= width,
            "slice bracket did not shrink around 0"
        );
        alpha = lo + (hi - lo) * rng.random::<f64>();
        n_shrinks += 1;
    }
}

/// `ζ_ψ | ψ ~ IGa(a + 1/2, b + ψ²/2)`; `IGa(3/2, 1 + ψ²/2)` under the default prior.
pub fn gibbs_zeta_psi<R: Rng + ?Sized>(psi: f64, priors: &Priors, rng: &mut R) -> Result<f64> {
    sample_inverse_gamma(
        priors.psi_shape + 0.5,
        priors.psi_rate + 0.5 * psi * psi,
        rng,
    )
}

/// `ζ | x ~ Ga(v + k, r + 1/x)`; `Ga(5/2, 1/2 + 1/x)` under the default prior.
pub fn gibbs_zeta_variance<R: Rng + ?Sized>(var: f64, priors: &Priors, rng: &mut R) -> Result<f64> {
    let p = priors.variance;
    sample_gamma(p.v + p.k, p.rate() + 1.0 / var, rng)
}

/// `τ² ~ IGa(k + MT/2, ζ_τ + ½ Σ_{m,j} (field_{m,j} - μ_m)²)`.
pub fn gibbs_tau2<R: Rng + ?Sized>(
    block: &GpBlockState,
    priors: &Priors,
    rng: &mut R,
) -> Result<f64> {
    let mut ss = 0.0;
    for ((m, _), &x) in block.field.indexed_iter() {
        let r = x - block.mu[m];
        ss += r * r;
    }
    let n = block.field.len() as f64;
    sample_inverse_gamma(priors.variance.k + 0.5 * n, block.zeta_tau2 + 0.5 * ss, rng)
}

/// `σ² ~ IGa(k + M/2, ζ_σ + ½ (μ - ψ1)ᵀ R⁻¹ (μ - ψ1))` with `R` the
/// correlation matrix at the current length scales.
pub fn gibbs_sigma2<R: Rng + ?Sized>(
    block: &GpBlockState,
    points: &[SpatialPoint],
    priors: &Priors,
    rng: &mut R,
) -> Result<f64> {
    let corr = correlation_factor(points, &block.lambdas)?;
    gibbs_sigma2_with(block, &corr, priors, rng)
}

pub(crate) fn gibbs_sigma2_with<R: Rng + ?Sized>(
    block: &GpBlockState,
    corr: &CholFactor,
    priors: &Priors,
    rng: &mut R,
) -> Result<f64> {
    let centred: Vec<f64> = block.mu.iter().map(|m| m - block.psi).collect();
    let q = corr.quad_form(&centred)?;
    let m = block.mu.len() as f64;
    sample_inverse_gamma(
        priors.variance.k + 0.5 * m,
        block.zeta_sigma2 + 0.5 * q,
        rng,
    )
}

/// `μ | ψ, field, σ², τ², λ`: the Gaussian posterior of the station means
/// given the year-level field, drawn by conditioning a prior draw on the
/// noisy station averages `ȳ_m ~ N(μ_m, τ²/T)`.
pub fn gibbs_gp_mean<R: Rng + ?Sized>(
    block: &GpBlockState,
    corr: &CholFactor,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (m, t) = block.field.dim();
    let noise = block.tau2 / t as f64;
    let sd = block.sigma2.sqrt();
    let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
    let prior: Vec<f64> = corr
        .mul_lower(&z)?
        .into_iter()
        .map(|v| block.psi + sd * v)
        .collect();
    let k = corr.reconstruct() * block.sigma2;
    let mut s = k.clone();
    for i in 0..m {
        s[[i, i]] += noise;
    }
    let s = cholesky_jittered(&s)?;
    let resid: Vec<f64> = (0..m)
        .map(|i| {
            let e: f64 = StandardNormal.sample(rng);
            block.field.row(i).sum() / t as f64 - prior[i] - noise.sqrt() * e
        })
        .collect();
    let w = Array1::from(s.solve(&resid)?);
    Ok((0..m).map(|i| prior[i] + k.row(i).dot(&w)).collect())
}

/// `ψ | μ, σ², λ, ζ_ψ ~ N(b/a, 1/a)` with `a = 1/ζ_ψ + 1ᵀR⁻¹1/σ²` and
/// `b = 1ᵀR⁻¹μ/σ²`.
pub fn gibbs_psi<R: Rng + ?Sized>(
    block: &GpBlockState,
    corr: &CholFactor,
    rng: &mut R,
) -> Result<f64> {
    let ones = vec![1.0; block.mu.len()];
    let r_inv_one = corr.solve(&ones)?;
    let a = 1.0 / block.zeta_psi + r_inv_one.iter().sum::<f64>() / block.sigma2;
    let b = r_inv_one
        .iter()
        .zip(&block.mu)
        .map(|(r, u)| r * u)
        .sum::<f64>()
        / block.sigma2;
    sample_normal(b / a, 1.0 / a, rng)
}

/// `β | field, τ², ζ_β`: Bayesian linear regression of every field cell on
/// its station's covariates with prior `β_h ~ N(0, ζ_h)`.
pub fn gibbs_linear_beta<R: Rng + ?Sized>(
    block: &LinearBlock,
    points: &[SpatialPoint],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let q = block.beta.len();
    let t = block.field.ncols() as f64;
    let mut prec = Array2::<f64>::zeros((q, q));
    let mut rhs = vec![0.0; q];
    for (i, p) in points.iter().enumerate() {
        let x: Vec<f64> = std::iter::once(1.0)
            .chain(p.coords().iter().copied())
            .collect();
        let y = block.field.row(i).sum();
        for a in 0..q {
            rhs[a] += x[a] * y / block.tau2;
            for b in 0..q {
                prec[[a, b]] += t * x[a] * x[b] / block.tau2;
            }
        }
    }
    for h in 0..q {
        prec[[h, h]] += 1.0 / block.zeta_beta[h];
    }
    let chol = cholesky_jittered(&prec)?;
    let mean = chol.solve(&rhs)?;
    let z: Vec<f64> = (0..q).map(|_| StandardNormal.sample(rng)).collect();
    let dev = chol.solve_upper(&z)?;
    Ok(mean.iter().zip(&dev).map(|(m, d)| m + d).collect())
}

/// The printed step-2 form for `τ²`: shape `k + M/2` and the sum `Σ_m (ψ - μ_m)²`.
pub(crate) fn printed_tau2<R: Rng + ?Sized>(
    block: &GpBlockState,
    priors: &Priors,
    rng: &mut R,
) -> Result<f64> {
    let ss: f64 = block.mu.iter().map(|m| (block.psi - m).powi(2)).sum();
    let m = block.mu.len() as f64;
    sample_inverse_gamma(priors.variance.k + 0.5 * m, block.zeta_tau2 + 0.5 * ss, rng)
}

/// The printed step-2 form for `σ²`: shape `k + MT/2` and the white-noise residuals.
pub(crate) fn printed_sigma2<R: Rng + ?Sized>(
    block: &GpBlockState,
    priors: &Priors,
    rng: &mut R,
) -> Result<f64> {
    let mut ss = 0.0;
    for ((m, _), &x) in block.field.indexed_iter() {
        ss += (block.mu[m] - x).powi(2);
    }
    let n = block.field.len() as f64;
    sample_inverse_gamma(
        priors.variance.k + 0.5 * n,
        block.zeta_sigma2 + 0.5 * ss,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::sample_normal;
    use crate::model::ChainRng;
    use rand::SeedableRng;
    use statrs::distribution::{ContinuousCDF, InverseGamma, LogNormal, Normal};

    fn ks<F: Fn(f64) -> f64>(mut xs: Vec<f64>, cdf: F) -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = cdf(x);
                (c - i as f64 / n).abs().max((c - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max)
    }

    fn block(m: usize, t: usize) -> GpBlockState {
        GpBlockState {
            psi: 0.0,
            mu: vec![0.0; m],
            field: Array2::zeros((m, t)),
            tau2: 1.0,
            sigma2: 1.0,
            lambdas: vec![1.0, 1.0],
            zeta_psi: 1.0,
            zeta_tau2: 1.0,
            zeta_sigma2: 1.0,
        }
    }

    #[test]
    fn config_validation_and_storage_rule() {
        let mut c = SamplerConfig {
            n_iterations: 100,
            burn_in: 10,
            thin: 3,
            ..Default::default()
        };
        c.validate().unwrap();
        assert_eq!(c.n_stored(), 30);
        assert_eq!((1..=100).filter(|&i| c.is_stored(i)).count(), 30);
        c.burn_in = 100;
        assert!(c.validate().is_err());
        c.burn_in = 0;
        c.thin = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn seed_splitting_is_deterministic_and_spread() {
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(42, i)).collect();
        assert_eq!(seeds.len(), 1000);
        // Reference value of the splitmix64 finalizer for input 0.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn zeta_psi_moments() {
        let mut rng = ChainRng::seed_from_u64(1);
        let p = Priors::default();
        let n = 1_000_000;
        let mean = (0..n)
            .map(|_| gibbs_zeta_psi(0.0, &p, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 2.0).abs() < 0.01 * 2.0, "{mean}");
        let draws: Vec<f64> = (0..100_000)
            .map(|_| gibbs_zeta_psi(2.0, &p, &mut rng).unwrap())
            .collect();
        let oracle = InverseGamma::new(1.5, 3.0).unwrap();
        assert!(ks(draws, |x| oracle.cdf(x)) < 0.01);
    }

    #[test]
    fn zeta_variance_moments() {
        let mut rng = ChainRng::seed_from_u64(2);
        let p = Priors::default();
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| gibbs_zeta_variance(1.0, &p, &mut rng).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!((mean - 5.0 / 3.0).abs() < 0.01 * 5.0 / 3.0, "{mean}");
        assert!(draws.iter().all(|&x| x > 0.0));
        let far = (0..n)
            .map(|_| gibbs_zeta_variance(1e300, &p, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((far - 5.0).abs() < 0.05, "{far}");
    }

    #[test]
    fn tau2_conditional_parameters() {
        let p = Priors::default();
        let mut b = block(1, 1);
        b.field[[0, 0]] = 2.0;
        let mut rng = ChainRng::seed_from_u64(3);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| gibbs_tau2(&b, &p, &mut rng).unwrap())
            .collect();
        let oracle = InverseGamma::new(2.5, 3.0).unwrap();
        assert!(ks(draws, |x| oracle.cdf(x)) < 0.01);
    }

    #[test]
    fn sigma2_scalar_case() {
        let p = Priors::default();
        let pts = vec![SpatialPoint::from([0.2, 0.1])];
        let mut b = block(1, 1);
        b.mu[0] = 1.5;
        b.psi = -0.5;
        b.zeta_sigma2 = 0.7;
        let mut rng = ChainRng::seed_from_u64(4);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| gibbs_sigma2(&b, &pts, &p, &mut rng).unwrap())
            .collect();
        let oracle = InverseGamma::new(2.5, 0.7 + 2.0).unwrap();
        assert!(ks(draws, |x| oracle.cdf(x)) < 0.01);
    }

    /// Normalizes prior × likelihood for a variance on a log grid and returns its CDF.
    fn numeric_cdf(log_density: impl Fn(f64) -> f64) -> impl Fn(f64) -> f64 {
        let n = 20_000;
        let (a, b) = ((1e-4f64).ln(), (1e4f64).ln());
        let h = (b - a) / n as f64;
        let xs: Vec<f64> = (0..=n).map(|i| (a + h * i as f64).exp()).collect();
        // density in log x: f(x) x
        let lw: Vec<f64> = xs.iter().map(|&x| log_density(x) + x.ln()).collect();
        let mx = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lw.iter().map(|l| (l - mx).exp()).collect();
        let mut cum = vec![0.0; n + 1];
        for i in 1..=n {
            cum[i] = cum[i - 1] + 0.5 * (w[i] + w[i - 1]) * h;
        }
        let total = cum[n];
        move |x: f64| {
            if x <= xs[0] {
                return 0.0;
            }
            if x >= xs[n] {
                return 1.0;
            }
            let t = (x.ln() - a) / h;
            let i = t.floor() as usize;
            let f = t - i as f64;
            (cum[i] * (1.0 - f) + cum[i + 1] * f) / total
        }
    }

    #[test]
    fn variance_conditionals_match_numerical_normalization() {
        let p = Priors::default();
        let pts = vec![
            SpatialPoint::from([0.0, 0.0]),
            SpatialPoint::from([0.5, -0.3]),
        ];
        let mut b = block(2, 2);
        b.psi = 0.2;
        b.mu = vec![0.9, -0.4];
        b.field = ndarray::array![[1.1, 0.3], [-0.8, 0.1]];
        b.lambdas = vec![0.7, 1.3];
        b.zeta_tau2 = 0.6;
        b.zeta_sigma2 = 1.4;
        let corr = correlation_factor(&pts, &b.lambdas).unwrap();
        let k = p.variance.k;

        let ss: f64 = b
            .field
            .indexed_iter()
            .map(|((m, _), x)| (x - b.mu[m]).powi(2))
            .sum();
        let tau_cdf = numeric_cdf(|t| {
            // IGa(k, ζ) prior times four N(μ_m, t) terms
            -(k + 1.0) * t.ln() - b.zeta_tau2 / t - 2.0 * t.ln() - 0.5 * ss / t
        });
        let mut rng = ChainRng::seed_from_u64(5);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| gibbs_tau2(&b, &p, &mut rng).unwrap())
            .collect();
        assert!(ks(draws, &tau_cdf) < 0.01);

        let sigma_cdf = numeric_cdf(|s| {
            let chol = corr.scaled(s.sqrt());
            let mean = vec![b.psi; 2];
            -(k + 1.0) * s.ln() - b.zeta_sigma2 / s
                + crate::kernel::mvn_logpdf(&b.mu, &mean, &chol).unwrap()
        });
        let draws: Vec<f64> = (0..100_000)
            .map(|_| gibbs_sigma2(&b, &pts, &p, &mut rng).unwrap())
            .collect();
        assert!(ks(draws, &sigma_cdf) < 0.01);
    }

    #[test]
    fn ess_constant_loglik_accepts_first_proposal() {
        let mut rng = ChainRng::seed_from_u64(6);
        for _ in 0..10_000 {
            let x = vec![0.3, -1.2];
            let out = ess_generic(
                &x,
                |r: &mut ChainRng| {
                    Ok(vec![
                        sample_normal(0.0, 1.0, r)?,
                        sample_normal(0.0, 1.0, r)?,
                    ])
                },
                |_| 0.0,
                &mut rng,
                DEFAULT_MAX_SHRINKS,
            )
            .unwrap();
            assert_eq!(out.n_shrinks, 0);
            assert!(out.state[0] != x[0] && out.state[1] != x[1]);
        }
    }

    #[test]
    fn ess_never_returns_the_input() {
        let mut rng = ChainRng::seed_from_u64(7);
        let mut x = 0.5f64;
        for _ in 0..10_000 {
            let out = ess_generic(
                &x,
                |r: &mut ChainRng| sample_normal(0.0, 1.0, r),
                |v: &f64| -0.5 * (v - 3.0).powi(2) / 0.01,
                &mut rng,
                DEFAULT_MAX_SHRINKS,
            )
            .unwrap();
            assert!(out.state != x);
            x = out.state;
        }
    }

    #[test]
    fn ess_recovers_conjugate_posterior() {
        // x ~ N(0, 1), y | x ~ N(x, 0.5) with y = 1.2 → x | y ~ N(0.8, 1/3).
        let mut rng = ChainRng::seed_from_u64(8);
        let mut x = 0.0f64;
        let mut kept = Vec::with_capacity(100_000);
        for i in 0..102_000 {
            x = ess_generic(
                &x,
                |r: &mut ChainRng| sample_normal(0.0, 1.0, r),
                |v: &f64| -(1.2 - v).powi(2),
                &mut rng,
                DEFAULT_MAX_SHRINKS,
            )
            .unwrap()
            .state;
            if i >= 2000 {
                kept.push(x);
            }
        }
        let post = Normal::new(0.8, (1.0f64 / 3.0).sqrt()).unwrap();
        assert!(ks(kept, |v| post.cdf(v)) < 0.01);
    }

    #[test]
    fn ess_reports_shrink_limit() {
        let mut rng = ChainRng::seed_from_u64(9);
        let mut first = true;
        let err = ess_generic(
            &0.0f64,
            |r: &mut ChainRng| sample_normal(0.0, 1.0, r),
            move |_| {
                if first {
                    first = false;
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            },
            &mut rng,
            5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShrinkLimit { max_shrinks: 5, .. }));
        assert!(err.is_numerical());
    }

    #[test]
    fn lengthscale_prior_recovered_for_single_station() {
        // With one station K is the scalar σ², so the likelihood is flat in λ.
        let p = Priors::default();
        let pts = vec![SpatialPoint::from([0.3, -0.2])];
        let mut b = block(1, 1);
        b.psi = 0.4;
        b.mu = vec![1.1];
        let mut rng = ChainRng::seed_from_u64(10);
        let mut draws = Vec::new();
        for _ in 0..10_000 {
            let (out, _) =
                ess_lengthscales(&b, &pts, &p, None, &mut rng, DEFAULT_MAX_SHRINKS).unwrap();
            assert!(out.state.iter().all(|&l| l > 0.0));
            b.lambdas = out.state;
            draws.push(b.lambdas[0]);
        }
        let oracle = LogNormal::new(0.0, 2f64.sqrt()).unwrap();
        assert!(ks(draws, |x| oracle.cdf(x)) < 0.02);
    }
}
