//! Semi-parametric Bayesian model for daily rainfall over a spatial domain.
//!
//! Wet-day counts follow a Binomial with logit `π`, event magnitudes a
//! Weibull with log-shape `γ` and log-scale `δ`. Each of the three layers is
//! a hierarchy of a global mean, a Gaussian-process station effect with a
//! Matérn-3/2 product kernel, and year-level white noise.

pub mod distributions;
pub mod error;
pub mod forecast;
pub mod io;
pub mod kernel;
pub mod model;
pub mod sampler;
pub mod scalar;
pub mod simstudy;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Station location or covariate vector in double precision.
pub type SpatialPoint = kernel::SpatialPoint<f64>;
/// Kernel amplitude and length scales in double precision.
pub type KernelParams = kernel::KernelParams<f64>;
/// Lower Cholesky factor in double precision.
pub type CholFactor = kernel::CholFactor<f64>;
