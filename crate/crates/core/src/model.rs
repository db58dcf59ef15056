//! Observed data, latent state of both models, and the block likelihoods.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::distributions::{
    binomial_logit_kernel, sample_gamma, sample_inverse_gamma, sample_normal, sigmoid,
    weibull_loglik_ln, CoGaParams, WeibullLogParams,
};
use crate::error::{Error, Result};
use crate::kernel::{cholesky_jittered, covariance_matrix, mvn_logpdf, CholFactor, KernelParams};
use crate::SpatialPoint;

/// Generator carried by every chain.
pub type ChainRng = ChaCha8Rng;

/// Default number of Bernoulli trials (days) per year.
pub const DEFAULT_TRIALS: u32 = 365;

/// The three parameter layers of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layer {
    /// Logit of the daily wet probability.
    Pi,
    /// Log Weibull shape.
    Gamma,
    /// Log Weibull scale.
    Delta,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::Pi, Layer::Gamma, Layer::Delta];

    pub fn name(self) -> &'static str {
        match self {
            Layer::Pi => "pi",
            Layer::Gamma => "gamma",
            Layer::Delta => "delta",
        }
    }
}

/// Prior constants shared by every layer.
///
/// * `ψ | ζ_ψ ~ N(0, ζ_ψ)` with `ζ_ψ ~ IGa(psi_shape, psi_rate)`; the default
///   `IGa(1, 1)` makes `ψ` marginally Student-t with two degrees of freedom.
/// * `τ², σ² ~ CoGa(v, k, scale)` through `x | ζ ~ IGa(k, ζ)`, `ζ ~ Ga(v, 1/scale)`.
/// * `log λ_h ~ N(0, log_lengthscale_var)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Priors {
    pub psi_shape: f64,
    pub psi_rate: f64,
    pub variance: CoGaParams,
    pub log_lengthscale_var: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            psi_shape: 1.0,
            psi_rate: 1.0,
            variance: CoGaParams {
                v: 0.5,
                k: 2.0,
                scale: 2.0,
            },
            log_lengthscale_var: 2.0,
        }
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        CoGaParams::new(self.variance.v, self.variance.k, self.variance.scale)?;
        for (name, x) in [
            ("psi_shape", self.psi_shape),
            ("psi_rate", self.psi_rate),
            ("log_lengthscale_var", self.log_lengthscale_var),
        ] {
            if !(x > 0.0) || !x.is_finite() {
                return Err(Error::Config(format!(
                    "prior constant {name} must be positive, got {x}"
                )));
            }
        }
        Ok(())
    }

    pub fn sample_zeta_psi<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        sample_inverse_gamma(self.psi_shape, self.psi_rate, rng)
    }

    pub fn sample_zeta_variance<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        sample_gamma(self.variance.v, self.variance.rate(), rng)
    }

    pub fn sample_variance_given_zeta<R: Rng + ?Sized>(
        &self,
        zeta: f64,
        rng: &mut R,
    ) -> Result<f64> {
        sample_inverse_gamma(self.variance.k, zeta, rng)
    }
}

/// Wet-day counts and event magnitudes for `M` stations over `T` years.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedData {
    points: Vec<SpatialPoint>,
    n_years: usize,
    n_trials: u32,
    counts: Array2<u32>,
    observed: Array2<bool>,
    /// Log magnitudes per cell, row-major over (station, year).
    ln_magnitudes: Vec<Vec<f64>>,
    sum_ln_magnitudes: Vec<f64>,
    ln_binom_total: f64,
}

impl ObservedData {
    /// Builds a dataset from magnitudes in millimetres. `magnitudes[m][j]`
    /// holds the events of station `m` in year `j`.
    pub fn new(
        points: Vec<SpatialPoint>,
        counts: Array2<u32>,
        magnitudes: Vec<Vec<Vec<f64>>>,
        n_trials: u32,
    ) -> Result<Self> {
        let mut ln = Vec::with_capacity(counts.len());
        for (m, station) in magnitudes.iter().enumerate() {
            for (j, cell) in station.iter().enumerate() {
                if let Some(w) = cell.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
                    return Err(Error::domain(format!(
                        "magnitude {w} at station {m}, year {j} is not a positive finite number"
                    )));
                }
                ln.push(cell.iter().map(|w| w.ln()).collect());
            }
        }
        if magnitudes.len() != counts.nrows() {
            return Err(Error::DimensionMismatch {
                expected: counts.nrows(),
                found: magnitudes.len(),
            });
        }
        if let Some(row) = magnitudes.iter().find(|r| r.len() != counts.ncols()) {
            return Err(Error::DimensionMismatch {
                expected: counts.ncols(),
                found: row.len(),
            });
        }
        Self::from_log_magnitudes(points, counts, ln, n_trials)
    }

    /// Builds a dataset from log-magnitudes laid out row-major over
    /// (station, year). Simulation uses this path so that extreme Weibull
    /// draws never underflow.
    pub fn from_log_magnitudes(
        points: Vec<SpatialPoint>,
        counts: Array2<u32>,
        ln_magnitudes: Vec<Vec<f64>>,
        n_trials: u32,
    ) -> Result<Self> {
        let (m, t) = counts.dim();
        if points.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: points.len(),
            });
        }
        if let Some(p0) = points.first() {
            if let Some(bad) = points.iter().find(|p| p.dim() != p0.dim()) {
                return Err(Error::DimensionMismatch {
                    expected: p0.dim(),
                    found: bad.dim(),
                });
            }
        }
        if ln_magnitudes.len() != m * t {
            return Err(Error::DimensionMismatch {
                expected: m * t,
                found: ln_magnitudes.len(),
            });
        }
        for ((i, j), &n) in counts.indexed_iter() {
            if n > n_trials {
                return Err(Error::domain(format!(
                    "count {n} at station {i}, year {j} exceeds {n_trials} trials"
                )));
            }
            let cell = &ln_magnitudes[i * t + j];
            if cell.len() != n as usize {
                return Err(Error::domain(format!(
                    "station {i}, year {j}: {} magnitudes for a count of {n}",
                    cell.len()
                )));
            }
            if cell.iter().any(|x| !x.is_finite()) {
                return Err(Error::domain(format!(
                    "station {i}, year {j}: non-finite log magnitude"
                )));
            }
        }
        let sum_ln_magnitudes = ln_magnitudes.iter().map(|c| c.iter().sum()).collect();
        let observed = Array2::from_elem((m, t), true);
        let mut data = ObservedData {
            points,
            n_years: t,
            n_trials,
            counts,
            observed,
            ln_magnitudes,
            sum_ln_magnitudes,
            ln_binom_total: 0.0,
        };
        data.refresh_binom_constant();
        Ok(data)
    }

    /// Marks station-years without records. Unobserved cells must have a zero
    /// count and contribute nothing to either likelihood.
    pub fn with_observed_mask(mut self, observed: Array2<bool>) -> Result<Self> {
        if observed.dim() != self.counts.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.counts.len(),
                found: observed.len(),
            });
        }
        for ((i, j), &o) in observed.indexed_iter() {
            if !o && self.counts[[i, j]] != 0 {
                return Err(Error::domain(format!(
                    "station {i}, year {j} is marked unobserved but has events"
                )));
            }
        }
        self.observed = observed;
        self.refresh_binom_constant();
        Ok(self)
    }

    fn refresh_binom_constant(&mut self) {
        self.ln_binom_total = self
            .counts
            .indexed_iter()
            .filter(|(ij, _)| self.observed[*ij])
            .map(|(_, &n)| ln_binomial(self.n_trials as u64, n as u64))
            .sum();
    }

    pub fn points(&self) -> &[SpatialPoint] {
        &self.points
    }

    pub fn n_stations(&self) -> usize {
        self.points.len()
    }

    pub fn n_years(&self) -> usize {
        self.n_years
    }

    /// Covariate dimension `p`.
    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.dim())
    }

    pub fn n_trials(&self) -> u32 {
        self.n_trials
    }

    pub fn counts(&self) -> &Array2<u32> {
        &self.counts
    }

    pub fn observed(&self) -> &Array2<bool> {
        &self.observed
    }

    pub fn is_observed(&self, station: usize, year: usize) -> bool {
        self.observed[[station, year]]
    }

    pub fn ln_magnitudes(&self, station: usize, year: usize) -> &[f64] {
        &self.ln_magnitudes[station * self.n_years + year]
    }

    /// Event magnitudes in millimetres.
    pub fn magnitudes(&self, station: usize, year: usize) -> Vec<f64> {
        self.ln_magnitudes(station, year)
            .iter()
            .map(|x| x.exp())
            .collect()
    }

    pub fn total_events(&self) -> usize {
        self.ln_magnitudes.iter().map(Vec::len).sum()
    }

    /// Mean magnitude over every event of a station.
    pub fn station_mean_magnitude(&self, station: usize) -> Option<f64> {
        let (s, n) = (0..self.n_years)
            .flat_map(|j| self.ln_magnitudes(station, j).iter())
            .fold((0.0, 0usize), |(s, n), x| (s + x.exp(), n + 1));
        (n > 0).then(|| s / n as f64)
    }

    fn check_field(&self, field: &Array2<f64>) -> Result<()> {
        if field.dim() != self.counts.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.counts.len(),
                found: field.len(),
            });
        }
        Ok(())
    }
}

/// Binomial log-likelihood of every observed count.
pub fn loglik_counts(data: &ObservedData, pi_field: &Array2<f64>) -> Result<f64> {
    data.check_field(pi_field)?;
    Ok(data.ln_binom_total + loglik_counts_kernel(data, pi_field))
}

/// Count log-likelihood without the binomial coefficients.
pub(crate) fn loglik_counts_kernel(data: &ObservedData, pi_field: &Array2<f64>) -> f64 {
    let n_trials = data.n_trials;
    data.counts
        .indexed_iter()
        .filter(|(ij, _)| data.observed[*ij])
        .map(|(ij, &n)| binomial_logit_kernel(n, n_trials, pi_field[ij]))
        .sum()
}

/// Weibull log-likelihood of every event magnitude.
pub fn loglik_magnitudes(
    data: &ObservedData,
    gamma_field: &Array2<f64>,
    delta_field: &Array2<f64>,
) -> Result<f64> {
    data.check_field(gamma_field)?;
    data.check_field(delta_field)?;
    Ok(loglik_magnitudes_unchecked(data, gamma_field, delta_field))
}

pub(crate) fn loglik_magnitudes_unchecked(
    data: &ObservedData,
    gamma: &Array2<f64>,
    delta: &Array2<f64>,
) -> f64 {
    let t = data.n_years;
    let mut total = 0.0;
    for (idx, cell) in data.ln_magnitudes.iter().enumerate() {
        if cell.is_empty() {
            continue;
        }
        let (m, j) = (idx / t, idx % t);
        total += cell_loglik_magnitudes(data, m, j, gamma[[m, j]], delta[[m, j]]);
    }
    total
}

/// Weibull log-likelihood of the events of one station-year.
pub(crate) fn cell_loglik_magnitudes(
    data: &ObservedData,
    m: usize,
    j: usize,
    g: f64,
    d: f64,
) -> f64 {
    let idx = m * data.n_years + j;
    let cell = &data.ln_magnitudes[idx];
    if cell.is_empty() {
        return 0.0;
    }
    let k = g.exp();
    let n = cell.len() as f64;
    // Σ [γ - δ + (k-1)(ln w - δ) - exp(k (ln w - δ))]
    let tail: f64 = cell.iter().map(|&lw| (k * (lw - d)).exp()).sum();
    n * (g - d) + (k - 1.0) * (data.sum_ln_magnitudes[idx] - n * d) - tail
}

/// Binomial kernel of one station-year; zero for unobserved cells.
pub(crate) fn cell_loglik_counts(data: &ObservedData, m: usize, j: usize, pi: f64) -> f64 {
    if data.observed[[m, j]] {
        binomial_logit_kernel(data.counts[[m, j]], data.n_trials, pi)
    } else {
        0.0
    }
}

/// Reference implementation used in tests: one scalar density call per event.
#[doc(hidden)]
pub fn loglik_magnitudes_naive(
    data: &ObservedData,
    gamma: &Array2<f64>,
    delta: &Array2<f64>,
) -> f64 {
    let mut total = 0.0;
    for m in 0..data.n_stations() {
        for j in 0..data.n_years {
            for &lw in data.ln_magnitudes(m, j) {
                total += weibull_loglik_ln(lw, WeibullLogParams::new(gamma[[m, j]], delta[[m, j]]));
            }
        }
    }
    total
}

/// Full latent state of one GP layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpBlockState {
    pub psi: f64,
    pub mu: Vec<f64>,
    pub field: Array2<f64>,
    pub tau2: f64,
    pub sigma2: f64,
    pub lambdas: Vec<f64>,
    pub zeta_psi: f64,
    pub zeta_tau2: f64,
    pub zeta_sigma2: f64,
}

impl GpBlockState {
    /// Starting point: `ψ = 0`, `μ = 0`, field `= 0`, `τ² = σ² = 1`, `λ = 1`,
    /// and the auxiliary scales drawn from their priors.
    pub fn initial<R: Rng + ?Sized>(
        m: usize,
        t: usize,
        p: usize,
        priors: &Priors,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GpBlockState {
            psi: 0.0,
            mu: vec![0.0; m],
            field: Array2::zeros((m, t)),
            tau2: 1.0,
            sigma2: 1.0,
            lambdas: vec![1.0; p],
            zeta_psi: priors.sample_zeta_psi(rng)?,
            zeta_tau2: priors.sample_zeta_variance(rng)?,
            zeta_sigma2: priors.sample_zeta_variance(rng)?,
        })
    }

    /// Starting point centred on a field estimate: `μ` the station means,
    /// `ψ` their mean, `τ²` and `σ²` the matching unbiased variances (floored),
    /// `λ = 1`, and the auxiliary scales drawn from their priors.
    pub fn from_field<R: Rng + ?Sized>(
        field: Array2<f64>,
        p: usize,
        priors: &Priors,
        rng: &mut R,
    ) -> Result<Self> {
        let (m, t) = field.dim();
        let mu: Vec<f64> = field
            .rows()
            .into_iter()
            .map(|r| r.sum() / t as f64)
            .collect();
        let psi = mu.iter().sum::<f64>() / m as f64;
        let resid = field
            .indexed_iter()
            .map(|((i, _), f)| (f - mu[i]).powi(2))
            .sum::<f64>();
        let tau2 = (resid / (m * t.saturating_sub(1).max(1)) as f64).max(MIN_START_VARIANCE);
        let sigma2 =
            (mu.iter().map(|u| (u - psi).powi(2)).sum::<f64>() / m as f64).max(MIN_START_VARIANCE);
        Ok(GpBlockState {
            psi,
            mu,
            field,
            tau2,
            sigma2,
            lambdas: vec![1.0; p],
            zeta_psi: priors.sample_zeta_psi(rng)?,
            zeta_tau2: priors.sample_zeta_variance(rng)?,
            zeta_sigma2: priors.sample_zeta_variance(rng)?,
        })
    }

    /// Draws every quantity of the layer from the hierarchical prior.
    pub fn sample_prior<R: Rng + ?Sized>(
        points: &[SpatialPoint],
        t: usize,
        priors: &Priors,
        rng: &mut R,
    ) -> Result<Self> {
        let m = points.len();
        let p = points.first().map_or(0, |x| x.dim());
        let zeta_psi = priors.sample_zeta_psi(rng)?;
        let zeta_tau2 = priors.sample_zeta_variance(rng)?;
        let zeta_sigma2 = priors.sample_zeta_variance(rng)?;
        let tau2 = priors.sample_variance_given_zeta(zeta_tau2, rng)?;
        let sigma2 = priors.sample_variance_given_zeta(zeta_sigma2, rng)?;
        let lambdas = (0..p)
            .map(|_| crate::distributions::sample_lognormal(0.0, priors.log_lengthscale_var, rng))
            .collect::<Result<Vec<_>>>()?;
        let psi = sample_normal(0.0, zeta_psi, rng)?;
        let corr = correlation_factor(points, &lambdas)?;
        let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
        let sd = sigma2.sqrt();
        let mu: Vec<f64> = corr
            .mul_lower(&z)?
            .into_iter()
            .map(|v| psi + sd * v)
            .collect();
        let tau = tau2.sqrt();
        let field = Array2::from_shape_fn((m, t), |(i, _)| {
            let e: f64 = StandardNormal.sample(rng);
            mu[i] + tau * e
        });
        Ok(GpBlockState {
            psi,
            mu,
            field,
            tau2,
            sigma2,
            lambdas,
            zeta_psi,
            zeta_tau2,
            zeta_sigma2,
        })
    }

    pub fn kernel_params(&self) -> Result<KernelParams<f64>> {
        KernelParams::new(self.sigma2, self.lambdas.clone())
    }

    pub fn n_stations(&self) -> usize {
        self.mu.len()
    }

    pub fn n_years(&self) -> usize {
        self.field.ncols()
    }

    /// Checks the positivity and shape invariants against a dataset shape.
    pub fn validate(&self, m: usize, t: usize, p: usize) -> Result<()> {
        if self.mu.len() != m || self.field.dim() != (m, t) || self.lambdas.len() != p {
            return Err(Error::domain("GP block dimensions do not match the data"));
        }
        let positive = [
            self.tau2,
            self.sigma2,
            self.zeta_psi,
            self.zeta_tau2,
            self.zeta_sigma2,
        ];
        if positive
            .iter()
            .chain(&self.lambdas)
            .any(|x| !(*x > 0.0) || !x.is_finite())
        {
            return Err(Error::domain(
                "GP block has a non-positive variance-like entry",
            ));
        }
        Ok(())
    }
}

/// Floor on starting variances so the first prior draws are not degenerate.
const MIN_START_VARIANCE: f64 = 1e-2;

/// Per-cell moment estimate with its approximate sampling variance.
#[derive(Clone, Copy)]
struct CellEstimate {
    value: f64,
    noise: f64,
}

/// Maximum-likelihood estimates of `(γ, δ)` from log magnitudes, with noise
/// variances from the Fisher information: `Var(ln k̂) ≈ 0.608/n` and
/// `Var(ln λ̂) ≈ 1.109/(n k²)`.
fn weibull_mle(ln: &[f64]) -> Option<(CellEstimate, CellEstimate)> {
    let n = ln.len() as f64;
    if ln.len() < 2 {
        return None;
    }
    let top = ln.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = ln.iter().sum::<f64>() / n;
    if !(top > mean) {
        return None;
    }
    // Profile score 1/k + mean(x) - Σ x e^{kx} / Σ e^{kx}, decreasing in k.
    let score = |k: f64| {
        let (mut sy, mut sxy) = (0.0, 0.0);
        for &x in ln {
            let y = (k * (x - top)).exp();
            sy += y;
            sxy += x * y;
        }
        1.0 / k + mean - sxy / sy
    };
    let (mut lo, mut hi) = ((-3.0f64).exp(), 3.0f64.exp());
    if score(lo) < 0.0 {
        hi = lo;
    } else if score(hi) > 0.0 {
        lo = hi;
    } else {
        for _ in 0..60 {
            let mid = (lo * hi).sqrt();
            if score(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let k = (lo * hi).sqrt();
    let sy = ln.iter().map(|x| (k * (x - top)).exp()).sum::<f64>();
    let delta = top + (sy / n).ln() / k;
    Some((
        CellEstimate {
            value: k.ln(),
            noise: 0.608 / n,
        },
        CellEstimate {
            value: delta,
            noise: 1.109 / (n * k * k),
        },
    ))
}

/// Keeps station means and shrinks year deviations so that their spread
/// matches the part not explained by sampling noise.
fn shrink_years(cells: &Array2<Option<CellEstimate>>, fallback: &[f64]) -> Array2<f64> {
    let (m, t) = cells.dim();
    let mut out = Array2::zeros((m, t));
    let (mut spread, mut noise) = (0.0, 0.0);
    let mut means = vec![0.0; m];
    for i in 0..m {
        let row: Vec<CellEstimate> = cells.row(i).iter().flatten().copied().collect();
        means[i] = if row.is_empty() {
            fallback[i]
        } else {
            row.iter().map(|c| c.value).sum::<f64>() / row.len() as f64
        };
        if row.len() >= 2 {
            let r = row.len() as f64;
            for c in &row {
                spread += (c.value - means[i]).powi(2);
                noise += c.noise * (r - 1.0) / r;
            }
        }
    }
    // Scale by the square root so the kept spread matches the signal variance.
    let keep = if spread > 0.0 {
        (1.0 - noise / spread).max(0.0).sqrt()
    } else {
        0.0
    };
    for ((i, j), c) in cells.indexed_iter() {
        out[[i, j]] = match c {
            Some(c) => means[i] + keep * (c.value - means[i]),
            None => means[i],
        };
    }
    out
}

/// Per-cell moment estimates of the three fields, used as a starting point.
///
/// `π` is the empirical logit with a half-count correction; `γ`, `δ` are
/// per-cell Weibull maximum-likelihood estimates. Year deviations around each station mean are
/// shrunk by their estimated sampling noise. Cells without an estimate take
/// the station value, then the pooled value of the whole dataset.
pub fn empirical_fields(data: &ObservedData) -> [Array2<f64>; 3] {
    let (m, t) = data.counts().dim();
    let n = data.n_trials() as f64;
    let logit = |c: f64, n: f64| CellEstimate {
        value: ((c + 0.5) / (n - c + 0.5)).ln(),
        noise: 1.0 / (c + 0.5) + 1.0 / (n - c + 0.5),
    };
    let all: Vec<f64> = data.ln_magnitudes.iter().flatten().copied().collect();
    let global = weibull_mle(&all).map_or((0.0, 0.0), |(g, d)| (g.value, d.value));
    let (mut wet, mut total) = (0.0, 0.0);
    for ((i, j), &c) in data.counts.indexed_iter() {
        if data.observed[[i, j]] {
            wet += c as f64;
            total += n;
        }
    }
    let global_pi = logit(wet, total).value;

    let mut pi = Array2::from_elem((m, t), None);
    let mut gamma = Array2::from_elem((m, t), None);
    let mut delta = Array2::from_elem((m, t), None);
    let mut station_pi = vec![global_pi; m];
    let mut station_gamma = vec![global.0; m];
    let mut station_delta = vec![global.1; m];
    for i in 0..m {
        let pooled: Vec<f64> = (0..t)
            .flat_map(|j| data.ln_magnitudes(i, j).iter().copied())
            .collect();
        if let Some((g, d)) = weibull_mle(&pooled) {
            station_gamma[i] = g.value;
            station_delta[i] = d.value;
        }
        let (mut sw, mut sn) = (0.0, 0.0);
        for j in 0..t {
            if data.observed[[i, j]] {
                let c = data.counts[[i, j]] as f64;
                sw += c;
                sn += n;
                pi[[i, j]] = Some(logit(c, n));
            }
            if let Some((g, d)) = weibull_mle(data.ln_magnitudes(i, j)) {
                gamma[[i, j]] = Some(g);
                delta[[i, j]] = Some(d);
            }
        }
        if sn > 0.0 {
            station_pi[i] = logit(sw, sn).value;
        }
    }
    [
        shrink_years(&pi, &station_pi),
        shrink_years(&gamma, &station_gamma),
        shrink_years(&delta, &station_delta),
    ]
}

/// Cholesky factor of the unit-amplitude correlation matrix.
pub fn correlation_factor(points: &[SpatialPoint], lambdas: &[f64]) -> Result<CholFactor<f64>> {
    let params = KernelParams::correlation(lambdas.to_vec())?;
    cholesky_jittered(&covariance_matrix(points, &params)?)
}

/// Log-density of `(ψ, μ, field)` under the layer's Gaussian hierarchy.
pub fn log_joint_gaussian_prior(block: &GpBlockState, points: &[SpatialPoint]) -> Result<f64> {
    let chol = correlation_factor(points, &block.lambdas)?.scaled(block.sigma2.sqrt());
    log_joint_gaussian_prior_with(block, &chol)
}

pub(crate) fn log_joint_gaussian_prior_with(
    block: &GpBlockState,
    cov_chol: &CholFactor<f64>,
) -> Result<f64> {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let psi_term = -0.5 * (ln_2pi + block.zeta_psi.ln() + block.psi * block.psi / block.zeta_psi);
    let mean = vec![block.psi; block.mu.len()];
    let mu_term = mvn_logpdf(&block.mu, &mean, cov_chol)?;
    let mut field_term = 0.0;
    for ((i, _), &x) in block.field.indexed_iter() {
        let r = x - block.mu[i];
        field_term += -0.5 * (ln_2pi + block.tau2.ln() + r * r / block.tau2);
    }
    Ok(psi_term + mu_term + field_term)
}

/// Latent state of the three layers plus the chain's generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub pi_block: GpBlockState,
    pub gamma_block: GpBlockState,
    pub delta_block: GpBlockState,
    pub iteration: u64,
    pub rng: ChainRng,
}

impl ChainState {
    pub fn block(&self, layer: Layer) -> &GpBlockState {
        match layer {
            Layer::Pi => &self.pi_block,
            Layer::Gamma => &self.gamma_block,
            Layer::Delta => &self.delta_block,
        }
    }

    pub fn block_mut(&mut self, layer: Layer) -> &mut GpBlockState {
        match layer {
            Layer::Pi => &mut self.pi_block,
            Layer::Gamma => &mut self.gamma_block,
            Layer::Delta => &mut self.delta_block,
        }
    }
}

/// One layer of the parametric competitor: a linear predictor in the
/// covariates (intercept first) plus white noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBlock {
    pub beta: Vec<f64>,
    pub zeta_beta: Vec<f64>,
    pub tau2: f64,
    pub zeta_tau2: f64,
    pub field: Array2<f64>,
}

impl LinearBlock {
    pub fn initial<R: Rng + ?Sized>(
        m: usize,
        t: usize,
        p: usize,
        priors: &Priors,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(LinearBlock {
            beta: vec![0.0; p + 1],
            zeta_beta: (0..=p)
                .map(|_| priors.sample_zeta_psi(rng))
                .collect::<Result<_>>()?,
            tau2: 1.0,
            zeta_tau2: priors.sample_zeta_variance(rng)?,
            field: Array2::zeros((m, t)),
        })
    }

    /// Starting point centred on a field estimate: `β` the least-squares fit
    /// of the station means on the covariates, `τ²` the mean squared residual
    /// of the field (floored).
    pub fn from_field<R: Rng + ?Sized>(
        field: Array2<f64>,
        points: &[SpatialPoint],
        priors: &Priors,
        rng: &mut R,
    ) -> Result<Self> {
        let (m, t) = field.dim();
        let p = points.first().map_or(0, |x| x.dim());
        let means: Vec<f64> = field
            .rows()
            .into_iter()
            .map(|r| r.sum() / t as f64)
            .collect();
        let row = |i: usize| std::iter::once(1.0).chain(points[i].coords().iter().copied());
        let mut xtx = Array2::<f64>::zeros((p + 1, p + 1));
        let mut xty = vec![0.0; p + 1];
        for i in 0..m {
            for (a, xa) in row(i).enumerate() {
                xty[a] += xa * means[i];
                for (b, xb) in row(i).enumerate() {
                    xtx[[a, b]] += xa * xb;
                }
            }
        }
        let beta = match cholesky_jittered(&xtx).and_then(|c| c.solve(&xty)) {
            Ok(b) => b,
            Err(_) => {
                let mut b = vec![0.0; p + 1];
                b[0] = means.iter().sum::<f64>() / m as f64;
                b
            }
        };
        let resid = field
            .indexed_iter()
            .map(|((i, _), f)| (f - linear_predictor(&beta, &points[i])).powi(2))
            .sum::<f64>();
        Ok(LinearBlock {
            beta,
            zeta_beta: (0..=p)
                .map(|_| priors.sample_zeta_psi(rng))
                .collect::<Result<_>>()?,
            tau2: (resid / (m * t) as f64).max(MIN_START_VARIANCE),
            zeta_tau2: priors.sample_zeta_variance(rng)?,
            field,
        })
    }

    pub fn sample_prior<R: Rng + ?Sized>(
        points: &[SpatialPoint],
        t: usize,
        priors: &Priors,
        rng: &mut R,
    ) -> Result<Self> {
        let p = points.first().map_or(0, |x| x.dim());
        let zeta_beta = (0..=p)
            .map(|_| priors.sample_zeta_psi(rng))
            .collect::<Result<Vec<_>>>()?;
        let beta = zeta_beta
            .iter()
            .map(|&z| sample_normal(0.0, z, rng))
            .collect::<Result<Vec<_>>>()?;
        let zeta_tau2 = priors.sample_zeta_variance(rng)?;
        let tau2 = priors.sample_variance_given_zeta(zeta_tau2, rng)?;
        let tau = tau2.sqrt();
        let field = Array2::from_shape_fn((points.len(), t), |(i, _)| {
            let e: f64 = StandardNormal.sample(rng);
            linear_predictor(&beta, &points[i]) + tau * e
        });
        Ok(LinearBlock {
            beta,
            zeta_beta,
            tau2,
            zeta_tau2,
            field,
        })
    }
}

/// `β₀ + Σ_h β_h s_h`.
#[inline]
pub fn linear_predictor(beta: &[f64], point: &SpatialPoint) -> f64 {
    beta[0]
        + beta[1..]
            .iter()
            .zip(point.coords())
            .map(|(b, s)| b * s)
            .sum::<f64>()
}

/// Latent state of the parametric competitor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModelState {
    pub pi_block: LinearBlock,
    pub gamma_block: LinearBlock,
    pub delta_block: LinearBlock,
    pub iteration: u64,
    pub rng: ChainRng,
}

impl LinearModelState {
    pub fn block(&self, layer: Layer) -> &LinearBlock {
        match layer {
            Layer::Pi => &self.pi_block,
            Layer::Gamma => &self.gamma_block,
            Layer::Delta => &self.delta_block,
        }
    }
}

/// One stored posterior draw of either model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PosteriorDraw {
    SemiParametric {
        iteration: u64,
        blocks: [GpBlockState; 3],
    },
    Parametric {
        iteration: u64,
        blocks: [LinearBlock; 3],
    },
}

impl PosteriorDraw {
    pub fn iteration(&self) -> u64 {
        match self {
            PosteriorDraw::SemiParametric { iteration, .. }
            | PosteriorDraw::Parametric { iteration, .. } => *iteration,
        }
    }

    pub fn from_chain(state: &ChainState) -> Self {
        PosteriorDraw::SemiParametric {
            iteration: state.iteration,
            blocks: [
                state.pi_block.clone(),
                state.gamma_block.clone(),
                state.delta_block.clone(),
            ],
        }
    }

    pub fn from_linear(state: &LinearModelState) -> Self {
        PosteriorDraw::Parametric {
            iteration: state.iteration,
            blocks: [
                state.pi_block.clone(),
                state.gamma_block.clone(),
                state.delta_block.clone(),
            ],
        }
    }

    /// Parameter field of one layer at the stations.
    pub fn field(&self, layer: Layer) -> &Array2<f64> {
        match self {
            PosteriorDraw::SemiParametric { blocks, .. } => &blocks[layer as usize].field,
            PosteriorDraw::Parametric { blocks, .. } => &blocks[layer as usize].field,
        }
    }
}

/// Simulates wet-day counts and magnitudes given parameter fields.
pub fn simulate_observations<R: Rng + ?Sized>(
    points: &[SpatialPoint],
    pi_field: &Array2<f64>,
    gamma_field: &Array2<f64>,
    delta_field: &Array2<f64>,
    n_trials: u32,
    rng: &mut R,
) -> Result<ObservedData> {
    let counts = pi_field.mapv(|pi| {
        Binomial::new(n_trials as u64, sigmoid(pi))
            .map(|b| b.sample(rng) as u32)
            .unwrap_or(0)
    });
    simulate_magnitudes(points, counts, gamma_field, delta_field, n_trials, rng)
}

/// Simulates Weibull magnitudes for fixed counts.
pub fn simulate_magnitudes<R: Rng + ?Sized>(
    points: &[SpatialPoint],
    counts: Array2<u32>,
    gamma_field: &Array2<f64>,
    delta_field: &Array2<f64>,
    n_trials: u32,
    rng: &mut R,
) -> Result<ObservedData> {
    let (m, t) = counts.dim();
    let mut ln = Vec::with_capacity(m * t);
    for i in 0..m {
        for j in 0..t {
            let k = gamma_field[[i, j]].exp();
            let d = delta_field[[i, j]];
            ln.push(
                (0..counts[[i, j]])
                    .map(|_| {
                        let e = -(1.0 - rng.random::<f64>()).ln();
                        d + e.ln() / k
                    })
                    .collect(),
            );
        }
    }
    ObservedData::from_log_magnitudes(points.to_vec(), counts, ln, n_trials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{binomial_logit_loglik, weibull_loglik};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn pts(m: usize) -> Vec<SpatialPoint> {
        (0..m)
            .map(|i| SpatialPoint::new(vec![i as f64 * 0.3 - 0.5, (i as f64 * 0.7).sin()]).unwrap())
            .collect()
    }

    fn small_data(rng: &mut ChainRng) -> ObservedData {
        let counts = ndarray::array![[3, 0], [1, 2]];
        let mags = vec![
            vec![vec![1.2, 0.4, 7.5], vec![]],
            vec![vec![2.0], vec![0.3, 11.0]],
        ];
        let _ = rng;
        ObservedData::new(pts(2), counts, mags, 10).unwrap()
    }

    #[test]
    fn rejects_inconsistent_data() {
        let counts = ndarray::array![[2]];
        assert!(ObservedData::new(pts(1), counts.clone(), vec![vec![vec![1.0]]], 10).is_err());
        assert!(
            ObservedData::new(pts(1), counts.clone(), vec![vec![vec![1.0, -1.0]]], 10).is_err()
        );
        assert!(
            ObservedData::new(pts(1), ndarray::array![[11]], vec![vec![vec![1.0; 11]]], 10)
                .is_err()
        );
        assert!(ObservedData::new(pts(2), counts, vec![vec![vec![1.0, 2.0]]], 10).is_err());
    }

    #[test]
    fn count_loglik_matches_scalar_calls() {
        let mut rng = ChainRng::seed_from_u64(1);
        let data = small_data(&mut rng);
        let pi = ndarray::array![[0.3, -1.1], [2.0, 0.05]];
        let expected: f64 = (0..2)
            .flat_map(|m| (0..2).map(move |j| (m, j)))
            .map(|(m, j)| binomial_logit_loglik(data.counts()[[m, j]], 10, pi[[m, j]]).unwrap())
            .sum();
        assert_relative_eq!(
            loglik_counts(&data, &pi).unwrap(),
            expected,
            epsilon = 1e-12
        );

        let single =
            ObservedData::new(pts(1), ndarray::array![[4]], vec![vec![vec![1.0; 4]]], 10).unwrap();
        assert_relative_eq!(
            loglik_counts(&single, &ndarray::array![[0.7]]).unwrap(),
            binomial_logit_loglik(4, 10, 0.7).unwrap(),
            epsilon = 1e-13
        );

        let full = ObservedData::new(pts(1), ndarray::array![[10]], vec![vec![vec![1.0; 10]]], 10)
            .unwrap();
        assert_eq!(
            loglik_counts(&full, &ndarray::array![[f64::INFINITY]]).unwrap(),
            0.0
        );
    }

    #[test]
    fn magnitude_loglik_matches_triple_loop() {
        let mut rng = ChainRng::seed_from_u64(1);
        let data = small_data(&mut rng);
        let g = ndarray::array![[0.3, -1.1], [0.2, 0.5]];
        let d = ndarray::array![[1.0, 0.0], [-0.4, 2.1]];
        let mut brute = 0.0;
        for m in 0..2 {
            for j in 0..2 {
                for w in data.magnitudes(m, j) {
                    brute +=
                        weibull_loglik(w, WeibullLogParams::new(g[[m, j]], d[[m, j]])).unwrap();
                }
            }
        }
        assert_relative_eq!(
            loglik_magnitudes(&data, &g, &d).unwrap(),
            brute,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            loglik_magnitudes_naive(&data, &g, &d),
            brute,
            epsilon = 1e-12
        );
    }

    #[test]
    fn magnitude_loglik_edge_cases() {
        let empty = ObservedData::new(pts(2), Array2::zeros((2, 3)), vec![vec![vec![]; 3]; 2], 365)
            .unwrap();
        let z = Array2::zeros((2, 3));
        assert_eq!(loglik_magnitudes(&empty, &z, &z).unwrap(), 0.0);
        let one =
            ObservedData::new(pts(1), ndarray::array![[1]], vec![vec![vec![1.0]]], 365).unwrap();
        let z = Array2::zeros((1, 1));
        assert_relative_eq!(loglik_magnitudes(&one, &z, &z).unwrap(), -1.0);
        assert!(loglik_magnitudes(&one, &Array2::zeros((2, 1)), &z).is_err());
    }

    #[test]
    fn magnitude_loglik_is_additive_over_years() {
        let mut rng = ChainRng::seed_from_u64(4);
        let p = pts(3);
        let g = Array2::from_shape_fn((3, 4), |(i, j)| 0.1 * i as f64 - 0.05 * j as f64);
        let d = Array2::from_shape_fn((3, 4), |(i, j)| 0.3 * j as f64 - 0.2 * i as f64);
        let counts = Array2::from_elem((3, 4), 5u32);
        let data = simulate_magnitudes(&p, counts, &g, &d, 365, &mut rng).unwrap();
        let whole = loglik_magnitudes(&data, &g, &d).unwrap();
        let mut parts = 0.0;
        for j in 0..4 {
            let c = Array2::from_elem((3, 1), 5u32);
            let ln: Vec<Vec<f64>> = (0..3).map(|m| data.ln_magnitudes(m, j).to_vec()).collect();
            let sub = ObservedData::from_log_magnitudes(p.clone(), c, ln, 365).unwrap();
            let gj = g.slice(ndarray::s![.., j..j + 1]).to_owned();
            let dj = d.slice(ndarray::s![.., j..j + 1]).to_owned();
            parts += loglik_magnitudes(&sub, &gj, &dj).unwrap();
        }
        assert_relative_eq!(whole, parts, epsilon = 1e-9);
    }

    #[test]
    fn unobserved_cells_are_ignored() {
        let data = ObservedData::new(
            pts(1),
            ndarray::array![[3, 0]],
            vec![vec![vec![1.0, 2.0, 3.0], vec![]]],
            10,
        )
        .unwrap()
        .with_observed_mask(ndarray::array![[true, false]])
        .unwrap();
        let pi = ndarray::array![[0.4, -3.0]];
        assert_relative_eq!(
            loglik_counts(&data, &pi).unwrap(),
            binomial_logit_loglik(3, 10, 0.4).unwrap(),
            epsilon = 1e-13
        );
    }

    #[test]
    fn joint_prior_reference_value() {
        let block = GpBlockState {
            psi: 0.0,
            mu: vec![0.0; 2],
            field: Array2::zeros((2, 2)),
            tau2: 1.0,
            sigma2: 1.0,
            lambdas: vec![1.0, 1.0],
            zeta_psi: 1.0,
            zeta_tau2: 1.0,
            zeta_sigma2: 1.0,
        };
        let eye = CholFactor::from_lower(Array2::eye(2), 0.0).unwrap();
        let std_normal_at_zero = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(
            log_joint_gaussian_prior_with(&block, &eye).unwrap(),
            7.0 * std_normal_at_zero,
            epsilon = 1e-13
        );
    }

    #[test]
    fn joint_prior_matches_stacked_gaussian() {
        // Stack (ψ, μ₁, μ₂, f₁₁, f₁₂, f₂₁, f₂₂); the hierarchy makes it a
        // zero-mean Gaussian with a covariance built from the blocks.
        let p = pts(2);
        let block = GpBlockState {
            psi: 0.4,
            mu: vec![-0.2, 0.9],
            field: ndarray::array![[0.1, -0.5], [1.3, 0.7]],
            tau2: 0.6,
            sigma2: 1.4,
            lambdas: vec![0.8, 1.7],
            zeta_psi: 2.0,
            zeta_tau2: 1.0,
            zeta_sigma2: 1.0,
        };
        let k = covariance_matrix(&p, &block.kernel_params().unwrap()).unwrap();
        let n = 7;
        // loadings: x = A z with z = (ψ, μ-ψ, f-μ)
        let mut cov = nalgebra::DMatrix::<f64>::zeros(n, n);
        let group = |i: usize| -> Option<usize> {
            match i {
                0 => None,
                1 | 2 => Some(i - 1),
                _ => Some((i - 3) / 2),
            }
        };
        for i in 0..n {
            for j in 0..n {
                let mut c = block.zeta_psi;
                if let (Some(a), Some(b)) = (group(i), group(j)) {
                    c += k[[a, b]];
                }
                if i >= 3 && i == j {
                    c += block.tau2;
                }
                cov[(i, j)] = c;
            }
        }
        let x = nalgebra::DVector::from_vec(vec![0.4, -0.2, 0.9, 0.1, -0.5, 1.3, 0.7]);
        let oracle = -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * cov.determinant().ln()
            - 0.5 * (x.transpose() * cov.clone().try_inverse().unwrap() * &x)[(0, 0)];
        assert_relative_eq!(
            log_joint_gaussian_prior(&block, &p).unwrap(),
            oracle,
            epsilon = 1e-9
        );
    }

    #[test]
    fn hierarchical_prior_draws_have_stacked_covariance() {
        // Fix the hyper-parameters and compare the empirical covariance of
        // (ψ, μ, field) with the analytic one.
        let p = pts(2);
        let mut rng = ChainRng::seed_from_u64(99);
        let (zeta, sigma2, tau2, lambdas) = (0.8, 1.2f64, 0.5f64, vec![0.6, 1.1]);
        let corr = correlation_factor(&p, &lambdas).unwrap();
        let kp = KernelParams::new(sigma2, lambdas.clone()).unwrap();
        let k = covariance_matrix(&p, &kp).unwrap();
        let n = 100_000;
        let mut acc = [[0.0; 4]; 4];
        for _ in 0..n {
            let psi = sample_normal(0.0, zeta, &mut rng).unwrap();
            let z: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mu: Vec<f64> = corr
                .mul_lower(&z)
                .unwrap()
                .iter()
                .map(|v| psi + sigma2.sqrt() * v)
                .collect();
            let f0 = mu[0]
                + tau2.sqrt() * {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    e
                };
            let x = [psi, mu[0], mu[1], f0];
            for a in 0..4 {
                for b in 0..4 {
                    acc[a][b] += x[a] * x[b] / n as f64;
                }
            }
        }
        let analytic = [
            [zeta, zeta, zeta, zeta],
            [zeta, zeta + k[[0, 0]], zeta + k[[0, 1]], zeta + k[[0, 0]]],
            [zeta, zeta + k[[1, 0]], zeta + k[[1, 1]], zeta + k[[1, 0]]],
            [
                zeta,
                zeta + k[[0, 0]],
                zeta + k[[0, 1]],
                zeta + k[[0, 0]] + tau2,
            ],
        ];
        for a in 0..4 {
            for b in 0..4 {
                assert!(
                    (acc[a][b] - analytic[a][b]).abs() / analytic[a][b] < 0.03,
                    "{a}{b}"
                );
            }
        }
    }

    #[test]
    fn loglik_is_permutation_invariant() {
        let mut rng = ChainRng::seed_from_u64(7);
        let p = pts(3);
        let g = Array2::from_shape_fn((3, 2), |(i, j)| 0.2 * i as f64 - 0.1 * j as f64);
        let d = Array2::from_shape_fn((3, 2), |(i, j)| 0.5 - 0.3 * i as f64 + 0.2 * j as f64);
        let pi = Array2::from_shape_fn((3, 2), |(i, j)| 0.1 * (i + j) as f64);
        let data = simulate_observations(&p, &pi, &g, &d, 20, &mut rng).unwrap();
        let perm = [2usize, 0, 1];
        let pp: Vec<_> = perm.iter().map(|&i| p[i].clone()).collect();
        let counts = Array2::from_shape_fn((3, 2), |(i, j)| data.counts()[[perm[i], 1 - j]]);
        let ln: Vec<Vec<f64>> = (0..3)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| data.ln_magnitudes(perm[i], 1 - j).to_vec())
            .collect();
        let shuffled = ObservedData::from_log_magnitudes(pp, counts, ln, 20).unwrap();
        let sh = |a: &Array2<f64>| Array2::from_shape_fn((3, 2), |(i, j)| a[[perm[i], 1 - j]]);
        assert_relative_eq!(
            loglik_counts(&data, &pi).unwrap(),
            loglik_counts(&shuffled, &sh(&pi)).unwrap(),
            epsilon = 1e-10
        );
        assert_relative_eq!(
            loglik_magnitudes(&data, &g, &d).unwrap(),
            loglik_magnitudes(&shuffled, &sh(&g), &sh(&d)).unwrap(),
            epsilon = 1e-9
        );
    }
}
