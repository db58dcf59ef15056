//! Scalar densities and samplers used by the model.
//!
//! Gamma-family distributions use the shape–rate convention throughout:
//! `Ga(a, b)` has mean `a / b` and `IGa(a, b)` has density proportional to
//! `x^(-a-1) exp(-b / x)`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Compounded gamma: `X | Z ~ IGa(k, Z)` with `Z ~ Ga(v, 1/scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoGaParams {
    pub v: f64,
    pub k: f64,
    pub scale: f64,
}

impl CoGaParams {
    pub fn new(v: f64, k: f64, scale: f64) -> Result<Self> {
        for (name, x) in [("v", v), ("k", k), ("scale", scale)] {
            if !(x > 0.0) || !x.is_finite() {
                return Err(Error::domain(format!(
                    "CoGa parameter {name} must be positive, got {x}"
                )));
            }
        }
        Ok(CoGaParams { v, k, scale })
    }

    /// Rate of the gamma mixing variable.
    pub fn rate(&self) -> f64 {
        1.0 / self.scale
    }
}

/// Weibull parameters on the log scale: shape `exp(gamma)`, scale `exp(delta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullLogParams {
    pub gamma: f64,
    pub delta: f64,
}

impl WeibullLogParams {
    pub fn new(gamma: f64, delta: f64) -> Self {
        WeibullLogParams { gamma, delta }
    }

    pub fn shape(&self) -> f64 {
        self.gamma.exp()
    }

    pub fn scale(&self) -> f64 {
        self.delta.exp()
    }
}

/// Weibull log-density at `w > 0`.
pub fn weibull_loglik(w: f64, params: WeibullLogParams) -> Result<f64> {
    if !(w > 0.0) || !w.is_finite() {
        return Err(Error::domain(format!(
            "Weibull observation must be positive, got {w}"
        )));
    }
    Ok(weibull_loglik_ln(w.ln(), params))
}

/// Weibull log-density written in terms of `ln w`; no argument checks.
#[inline]
pub fn weibull_loglik_ln(ln_w: f64, params: WeibullLogParams) -> f64 {
    let k = params.gamma.exp();
    let z = ln_w - params.delta;
    params.gamma - params.delta + (k - 1.0) * z - (k * z).exp()
}

/// Draws a Weibull variate by inversion.
pub fn sample_weibull<R: Rng + ?Sized>(params: WeibullLogParams, rng: &mut R) -> f64 {
    // -ln(1 - U) with U in [0, 1) is a standard exponential.
    let e = -(1.0 - rng.random::<f64>()).ln();
    (params.delta + e.ln() / params.shape()).exp()
}

/// `ln σ(x)` for the logistic function, stable for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Logistic function `(1 + e^{-x})^{-1}`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binomial log-pmf with success probability `σ(pi)`.
pub fn binomial_logit_loglik(n: u32, n_trials: u32, pi: f64) -> Result<f64> {
    if n > n_trials {
        return Err(Error::domain(format!(
            "count {n} exceeds number of trials {n_trials}"
        )));
    }
    Ok(ln_binomial(n_trials as u64, n as u64) + binomial_logit_kernel(n, n_trials, pi))
}

/// Binomial log-pmf without the binomial coefficient.
#[inline]
pub(crate) fn binomial_logit_kernel(n: u32, n_trials: u32, pi: f64) -> f64 {
    let mut out = 0.0;
    if n > 0 {
        out += n as f64 * log_sigmoid(pi);
    }
    if n < n_trials {
        out += (n_trials - n) as f64 * log_sigmoid(-pi);
    }
    out
}

/// Log-density of the compounded gamma.
pub fn coga_ln_pdf(x: f64, params: CoGaParams) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::domain(format!("CoGa density needs x > 0, got {x}")));
    }
    let CoGaParams { v, k, .. } = params;
    let r = params.rate();
    Ok(ln_gamma(k + v) - ln_gamma(k) - ln_gamma(v) + v * r.ln()
        - (k + 1.0) * x.ln()
        - (k + v) * (r + 1.0 / x).ln())
}

/// Density of the compounded gamma (the gamma mixing variable integrated out).
pub fn coga_pdf(x: f64, params: CoGaParams) -> Result<f64> {
    coga_ln_pdf(x, params).map(f64::exp)
}

/// Draws `Z ~ Ga(v, 1/scale)` then `X ~ IGa(k, Z)`.
pub fn coga_sample<R: Rng + ?Sized>(params: CoGaParams, rng: &mut R) -> Result<f64> {
    let z = sample_gamma(params.v, params.rate(), rng)?;
    sample_inverse_gamma(params.k, z, rng)
}

pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::domain(format!(
            "gamma rate must be positive, got {rate}"
        )));
    }
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::domain(format!("gamma({shape}, {rate}): {e}")))?;
    Ok(g.sample(rng))
}

pub fn sample_inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::domain(format!(
            "inverse gamma rate must be positive, got {rate}"
        )));
    }
    let g = Gamma::new(shape, 1.0)
        .map_err(|e| Error::domain(format!("inverse gamma({shape}, {rate}): {e}")))?;
    Ok(rate / g.sample(rng))
}

pub fn sample_normal<R: Rng + ?Sized>(mean: f64, var: f64, rng: &mut R) -> Result<f64> {
    if !(var >= 0.0) || !var.is_finite() {
        return Err(Error::domain(format!(
            "normal variance must be non-negative, got {var}"
        )));
    }
    let z: f64 = StandardNormal.sample(rng);
    Ok(mean + var.sqrt() * z)
}

pub fn sample_lognormal<R: Rng + ?Sized>(mu: f64, sigma2: f64, rng: &mut R) -> Result<f64> {
    sample_normal(mu, sigma2, rng).map(f64::exp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use quadrature::double_exponential::integrate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// ∫_0^∞ f via the substitution x = t / (1 - t).
    fn integrate_half_line(f: impl Fn(f64) -> f64) -> f64 {
        integrate(
            |t| {
                let x = t / (1.0 - t);
                let v = f(x) / ((1.0 - t) * (1.0 - t));
                if v.is_finite() {
                    v
                } else {
                    0.0
                }
            },
            0.0,
            1.0,
            1e-12,
        )
        .integral
    }

    fn ks_distance(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = samples.len() as f64;
        samples
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = cdf(x);
                (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn weibull_reference_points() {
        assert_relative_eq!(
            weibull_loglik(1.0, WeibullLogParams::new(0.0, 0.0)).unwrap(),
            -1.0
        );
        for delta in [-1.3f64, 0.0, 2.2] {
            assert_relative_eq!(
                weibull_loglik(delta.exp(), WeibullLogParams::new(0.0, delta)).unwrap(),
                -delta - 1.0,
                epsilon = 1e-13
            );
        }
        assert!(weibull_loglik(0.0, WeibullLogParams::new(0.0, 0.0)).is_err());
        assert!(weibull_loglik(-1.0, WeibullLogParams::new(0.0, 0.0)).is_err());
    }

    #[test]
    fn weibull_normalizes() {
        let p = WeibullLogParams::new(0.3, 0.7);
        let total = integrate_half_line(|w| {
            if w > 0.0 {
                weibull_loglik(w, p).unwrap().exp()
            } else {
                0.0
            }
        });
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn weibull_sampler_matches_cdf() {
        let p = WeibullLogParams::new(-0.4, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut xs: Vec<f64> = (0..100_000).map(|_| sample_weibull(p, &mut rng)).collect();
        let d = ks_distance(&mut xs, |x| 1.0 - (-(x / p.scale()).powf(p.shape())).exp());
        // 1e-3 critical value at n = 1e5 is 1.95 / sqrt(n)
        assert!(d < 1.95 / (1e5f64).sqrt(), "{d}");
    }

    #[test]
    fn binomial_reference_points() {
        assert_eq!(binomial_logit_loglik(365, 365, f64::INFINITY).unwrap(), 0.0);
        assert_relative_eq!(binomial_logit_loglik(365, 365, 800.0).unwrap(), 0.0);
        assert_relative_eq!(
            binomial_logit_loglik(0, 365, 0.0).unwrap(),
            -252.998_720_904_380_04,
            epsilon = 1e-9
        );
        assert!(binomial_logit_loglik(11, 10, 0.0).is_err());
    }

    #[test]
    fn binomial_normalizes_and_stays_finite() {
        let total: f64 = (0..=20)
            .map(|n| binomial_logit_loglik(n, 20, 1.3).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-10);
        for pi in [-700.0, -50.0, 0.0, 50.0, 700.0] {
            for n in [0, 5, 365] {
                assert!(binomial_logit_loglik(n, 365, pi).unwrap().is_finite());
            }
        }
    }

    #[test]
    fn binomial_monotone_below_mode() {
        let pi = 0.8;
        let mode = (366.0 * sigmoid(pi)).floor() as u32;
        let mut prev = f64::NEG_INFINITY;
        for n in 0..=mode {
            let v = binomial_logit_loglik(n, 365, pi).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert_relative_eq!(log_sigmoid(0.0), 0.5f64.ln());
        assert_relative_eq!(log_sigmoid(-700.0), -700.0);
        assert!(log_sigmoid(700.0) < 0.0 && log_sigmoid(700.0) > -1e-300);
        assert_relative_eq!(sigmoid(2.0), 1.0 / (1.0 + (-2.0f64).exp()));
        assert_relative_eq!(sigmoid(-2.0), 1.0 / (1.0 + 2.0f64.exp()), epsilon = 1e-16);
    }

    #[test]
    fn coga_normalizes_and_is_unbounded_at_zero() {
        let p = CoGaParams::new(0.5, 2.0, 2.0).unwrap();
        let total = integrate_half_line(|x| {
            if x > 0.0 {
                coga_pdf(x, p).unwrap()
            } else {
                0.0
            }
        });
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        let mut prev = 0.0;
        for x in [1e-2, 1e-4, 1e-6, 1e-8] {
            let v = coga_pdf(x, p).unwrap();
            assert!(v > prev);
            prev = v;
        }
        assert!(prev > 1e3);
        assert!(coga_pdf(0.0, p).is_err());
        assert!(CoGaParams::new(0.0, 2.0, 2.0).is_err());
    }

    #[test]
    fn coga_samples_positive_and_deterministic() {
        let p = CoGaParams::new(0.5, 2.0, 2.0).unwrap();
        let a: Vec<f64> = {
            let mut r = ChaCha8Rng::seed_from_u64(4);
            (0..100).map(|_| coga_sample(p, &mut r).unwrap()).collect()
        };
        let b: Vec<f64> = {
            let mut r = ChaCha8Rng::seed_from_u64(4);
            (0..100).map(|_| coga_sample(p, &mut r).unwrap()).collect()
        };
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn gamma_family_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 1_000_000;
        let m: f64 = (0..n)
            .map(|_| sample_gamma(2.0, 4.0, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((m - 0.5).abs() < 0.002, "{m}");
        let m: f64 = (0..n)
            .map(|_| sample_inverse_gamma(3.0, 2.0, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((m - 1.0).abs() < 0.005, "{m}");
        let mut xs: Vec<f64> = (0..n)
            .map(|_| sample_lognormal(0.0, 2.0, &mut rng).unwrap())
            .collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = xs[n / 2];
        assert!((med - 1.0).abs() < 0.01, "{med}");
        assert!(sample_gamma(1.0, 0.0, &mut rng).is_err());
        assert!(sample_normal(0.0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn samplers_match_their_cdfs() {
        use statrs::distribution::{
            ContinuousCDF, Gamma as SGamma, InverseGamma, LogNormal, Normal,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 100_000;
        let crit = 1.95 / (n as f64).sqrt();

        let g = SGamma::new(2.5, 1.5).unwrap();
        let mut xs: Vec<f64> = (0..n)
            .map(|_| sample_gamma(2.5, 1.5, &mut rng).unwrap())
            .collect();
        assert!(ks_distance(&mut xs, |x| g.cdf(x)) < crit);

        let ig = InverseGamma::new(1.5, 2.0).unwrap();
        let mut xs: Vec<f64> = (0..n)
            .map(|_| sample_inverse_gamma(1.5, 2.0, &mut rng).unwrap())
            .collect();
        assert!(ks_distance(&mut xs, |x| ig.cdf(x)) < crit);

        let ln = LogNormal::new(0.0, 2f64.sqrt()).unwrap();
        let mut xs: Vec<f64> = (0..n)
            .map(|_| sample_lognormal(0.0, 2.0, &mut rng).unwrap())
            .collect();
        assert!(ks_distance(&mut xs, |x| ln.cdf(x)) < crit);

        let nd = Normal::new(1.0, 0.5).unwrap();
        let mut xs: Vec<f64> = (0..n)
            .map(|_| sample_normal(1.0, 0.25, &mut rng).unwrap())
            .collect();
        assert!(ks_distance(&mut xs, |x| nd.cdf(x)) < crit);
    }

    #[test]
    fn student_t2_scale_mixture() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        let t2 = StudentsT::new(0.0, 1.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n)
            .map(|_| {
                let zeta = sample_inverse_gamma(1.0, 1.0, &mut rng).unwrap();
                sample_normal(0.0, zeta, &mut rng).unwrap()
            })
            .collect();
        assert!(ks_distance(&mut xs, |x| t2.cdf(x)) < 1.95 / (n as f64).sqrt());
    }
}
