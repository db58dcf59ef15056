//! Joint-distribution test of the sampler.
//!
//! The marginal-conditional simulator draws parameters from the prior and
//! data given parameters. The successive-conditional simulator alternates a
//! full scan with regenerating the data. Both target the joint law of
//! parameters and data, so the means of any test function must agree.

use rand::{Rng, SeedableRng};

use super::{
    derive_seed, AnyState, ModelKind, ParametricSampler, SamplerConfig, SemiParametricSampler,
    Step2Conditionals,
};
use crate::distributions::CoGaParams;
use crate::error::{Error, Result};
use crate::model::{
    simulate_observations, ChainRng, ChainState, GpBlockState, Layer, LinearBlock,
    LinearModelState, ObservedData, Priors,
};
use crate::SpatialPoint;

#[derive(Debug, Clone, PartialEq)]
pub struct GewekeConfig {
    pub model: ModelKind,
    pub n_stations: usize,
    pub n_years: usize,
    pub dim: usize,
    pub n_trials: u32,
    pub n_draws: usize,
    /// Batches used for the variance of the successive-conditional mean.
    pub n_batches: usize,
    pub seed: u64,
    pub priors: Priors,
    pub step2: Step2Conditionals,
    pub local_updates: bool,
    /// Acceptance bound on every |z|.
    pub threshold: f64,
}

impl Default for GewekeConfig {
    fn default() -> Self {
        GewekeConfig {
            model: ModelKind::SemiParametric,
            n_stations: 3,
            n_years: 2,
            dim: 2,
            n_trials: 10,
            n_draws: 100_000,
            n_batches: 50,
            seed: 20_240_917,
            priors: geweke_priors(),
            step2: Step2Conditionals::Exact,
            local_updates: true,
            threshold: 4.0,
        }
    }
}

/// Prior constants for the test instance.
///
/// The default priors have infinite-variance marginals (Student-t₂ means and
/// compounded-gamma variances), which rules out moment comparisons, and put
/// mass on Weibull shapes extreme enough to underflow. These constants keep
/// the same structure with light tails.
pub fn geweke_priors() -> Priors {
    Priors {
        psi_shape: 5.0,
        psi_rate: 2.0,
        variance: CoGaParams {
            v: 4.0,
            k: 4.0,
            scale: 0.125,
        },
        log_lengthscale_var: 0.5,
    }
}

/// Fixed station layout of the test instance.
pub fn geweke_points(m: usize, p: usize) -> Vec<SpatialPoint> {
    (0..m)
        .map(|i| {
            let coords = (0..p)
                .map(|h| ((i * (h + 2) + h) as f64 * 0.6180339887).fract() * 2.0 - 1.0)
                .collect();
            SpatialPoint::new(coords).expect("finite coordinates")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GewekeStat {
    pub name: String,
    pub mc_mean: f64,
    pub sc_mean: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GewekeReport {
    pub stats: Vec<GewekeStat>,
    pub threshold: f64,
}

impl GewekeReport {
    pub fn max_abs_z(&self) -> f64 {
        self.stats.iter().map(|s| s.z.abs()).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.stats.iter().all(|s| s.z.abs() < self.threshold)
    }
}

fn gp_functions(prefix: &str, b: &GpBlockState, names: &mut Vec<String>, out: &mut Vec<f64>) {
    let values = [
        ("psi", b.psi),
        ("psi^2", b.psi * b.psi),
        ("tau2", b.tau2),
        ("log tau2", b.tau2.ln()),
        ("sigma2", b.sigma2),
        ("log sigma2", b.sigma2.ln()),
        ("log lambda1", b.lambdas[0].ln()),
        ("mu1", b.mu[0]),
        ("field11", b.field[[0, 0]]),
        ("field11^2", b.field[[0, 0]].powi(2)),
    ];
    for (n, v) in values {
        names.push(format!("{prefix}.{n}"));
        out.push(v);
    }
}

fn linear_functions(prefix: &str, b: &LinearBlock, names: &mut Vec<String>, out: &mut Vec<f64>) {
    let values = [
        ("beta0", b.beta[0]),
        ("beta0^2", b.beta[0] * b.beta[0]),
        ("beta1", b.beta.get(1).copied().unwrap_or(0.0)),
        ("tau2", b.tau2),
        ("log tau2", b.tau2.ln()),
        ("field11", b.field[[0, 0]]),
        ("field11^2", b.field[[0, 0]].powi(2)),
    ];
    for (n, v) in values {
        names.push(format!("{prefix}.{n}"));
        out.push(v);
    }
}

fn test_functions(
    state: &AnyState,
    data: &ObservedData,
    names: &mut Vec<String>,
    out: &mut Vec<f64>,
) {
    names.clear();
    out.clear();
    for layer in Layer::ALL {
        match state {
            AnyState::SemiParametric(s) => gp_functions(layer.name(), s.block(layer), names, out),
            AnyState::Parametric(s) => linear_functions(layer.name(), s.block(layer), names, out),
        }
    }
    names.push("N11".into());
    out.push(data.counts()[[0, 0]] as f64);
    let events = data.ln_magnitudes(0, 0);
    names.push("any event at 11".into());
    out.push(if events.is_empty() { 0.0 } else { 1.0 });
}

fn regenerate(
    state: &AnyState,
    points: &[SpatialPoint],
    n_trials: u32,
    rng: &mut ChainRng,
) -> Result<ObservedData> {
    let d = state.draw();
    simulate_observations(
        points,
        d.field(Layer::Pi),
        d.field(Layer::Gamma),
        d.field(Layer::Delta),
        n_trials,
        rng,
    )
}

fn prior_state(
    config: &GewekeConfig,
    points: &[SpatialPoint],
    rng: &mut ChainRng,
) -> Result<AnyState> {
    let t = config.n_years;
    let pr = &config.priors;
    Ok(match config.model {
        ModelKind::SemiParametric => AnyState::SemiParametric(ChainState {
            pi_block: GpBlockState::sample_prior(points, t, pr, rng)?,
            gamma_block: GpBlockState::sample_prior(points, t, pr, rng)?,
            delta_block: GpBlockState::sample_prior(points, t, pr, rng)?,
            iteration: 0,
            rng: ChainRng::seed_from_u64(rng.random()),
        }),
        ModelKind::Parametric => AnyState::Parametric(LinearModelState {
            pi_block: LinearBlock::sample_prior(points, t, pr, rng)?,
            gamma_block: LinearBlock::sample_prior(points, t, pr, rng)?,
            delta_block: LinearBlock::sample_prior(points, t, pr, rng)?,
            iteration: 0,
            rng: ChainRng::seed_from_u64(rng.random()),
        }),
    })
}

/// Runs both simulators and compares the means of every test function.
pub fn geweke_test(config: &GewekeConfig) -> Result<GewekeReport> {
    if config.n_draws < config.n_batches || config.n_batches < 2 {
        return Err(Error::Config(
            "need at least two batches and one draw per batch".into(),
        ));
    }
    let points = geweke_points(config.n_stations, config.dim);
    let mut names = Vec::new();
    let mut row = Vec::new();

    // marginal-conditional
    let mut rng = ChainRng::seed_from_u64(derive_seed(config.seed, 1));
    let mut mc_sum: Vec<f64> = Vec::new();
    let mut mc_sq: Vec<f64> = Vec::new();
    for _ in 0..config.n_draws {
        let state = prior_state(config, &points, &mut rng)?;
        let data = regenerate(&state, &points, config.n_trials, &mut rng)?;
        test_functions(&state, &data, &mut names, &mut row);
        if mc_sum.is_empty() {
            mc_sum = vec![0.0; row.len()];
            mc_sq = vec![0.0; row.len()];
        }
        for (i, v) in row.iter().enumerate() {
            mc_sum[i] += v;
            mc_sq[i] += v * v;
        }
    }

    // successive-conditional
    let mut rng = ChainRng::seed_from_u64(derive_seed(config.seed, 2));
    let mut state = prior_state(config, &points, &mut rng)?;
    let mut data = regenerate(&state, &points, config.n_trials, &mut rng)?;
    let sampler_config = SamplerConfig {
        n_iterations: config.n_draws as u64,
        burn_in: 0,
        thin: 1,
        seed: derive_seed(config.seed, 3),
        priors: config.priors,
        max_shrinks: super::DEFAULT_MAX_SHRINKS,
        fit_counts: true,
        step2: config.step2,
        init: super::Initialization::Zero,
        local_updates: config.local_updates,
    };
    let mut semi = SemiParametricSampler::new(sampler_config.clone())?;
    let mut para = ParametricSampler::new(sampler_config)?;
    let batch = config.n_draws / config.n_batches;
    let n_sc = batch * config.n_batches;
    let k = mc_sum.len();
    let mut batch_sums = vec![vec![0.0; k]; config.n_batches];
    for i in 0..n_sc {
        match &mut state {
            AnyState::SemiParametric(s) => semi.scan(s, &data)?,
            AnyState::Parametric(s) => para.scan(s, &data)?,
        };
        data = regenerate(&state, &points, config.n_trials, &mut rng)?;
        test_functions(&state, &data, &mut names, &mut row);
        for (j, v) in row.iter().enumerate() {
            batch_sums[i / batch][j] += v;
        }
    }

    let n = config.n_draws as f64;
    let b = config.n_batches as f64;
    let stats = (0..k)
        .map(|j| {
            let mc_mean = mc_sum[j] / n;
            let mc_var = (mc_sq[j] / n - mc_mean * mc_mean).max(0.0) * n / (n - 1.0);
            let means: Vec<f64> = batch_sums.iter().map(|s| s[j] / batch as f64).collect();
            let sc_mean = means.iter().sum::<f64>() / b;
            let batch_var = means.iter().map(|m| (m - sc_mean).powi(2)).sum::<f64>() / (b - 1.0);
            let se = (mc_var / n + batch_var / b).sqrt();
            let z = if se > 0.0 {
                (mc_mean - sc_mean) / se
            } else {
                0.0
            };
            GewekeStat {
                name: names[j].clone(),
                mc_mean,
                sc_mean,
                z,
            }
        })
        .collect();
    Ok(GewekeReport {
        stats,
        threshold: config.threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_run_produces_finite_statistics() {
        let config = GewekeConfig {
            n_draws: 2000,
            n_batches: 20,
            ..Default::default()
        };
        let report = geweke_test(&config).unwrap();
        assert!(report.stats.len() >= 12);
        assert!(report.stats.iter().all(|s| s.z.is_finite()));
    }

    #[test]
    fn layout_is_inside_the_unit_box() {
        let pts = geweke_points(5, 3);
        assert!(pts
            .iter()
            .all(|p| p.coords().iter().all(|c| (-1.0..=1.0).contains(c))));
    }
}
