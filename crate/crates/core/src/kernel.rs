//! Matérn-3/2 product kernel, covariance assembly and the small dense
//! Cholesky toolkit used for the Gaussian-process layers.
//!
//! Everything here is generic over [`Scalar`] so the same code runs in `f32`
//! or `f64`; the sampler itself works in `f64` through the aliases exported
//! at the crate root.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative jitter ladder applied to the mean diagonal when a factorization
/// fails.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// A point of the covariate domain (coordinates plus topographical features,
/// in standardized units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialPoint<S> {
    coords: Vec<S>,
}

impl<S: Scalar> SpatialPoint<S> {
    pub fn new(coords: Vec<S>) -> Result<Self> {
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::domain("spatial point has a non-finite coordinate"));
        }
        Ok(SpatialPoint { coords })
    }

    pub fn coords(&self) -> &[S] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Returns the point shifted by `offset` in every coordinate.
    pub fn shifted(&self, offset: &[S]) -> Result<Self> {
        check_dim(self.dim(), offset.len())?;
        Self::new(
            self.coords
                .iter()
                .zip(offset)
                .map(|(&c, &o)| c + o)
                .collect(),
        )
    }
}

impl<S: Scalar> From<[S; 2]> for SpatialPoint<S> {
    fn from(c: [S; 2]) -> Self {
        SpatialPoint { coords: c.to_vec() }
    }
}

/// Amplitude and per-dimension length scales of the product kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams<S> {
    sigma2: S,
    lambdas: Vec<S>,
}

impl<S: Scalar> KernelParams<S> {
    pub fn new(sigma2: S, lambdas: Vec<S>) -> Result<Self> {
        if !(sigma2 > S::zero()) || !sigma2.is_finite() {
            return Err(Error::domain(format!(
                "kernel variance must be positive, got {sigma2}"
            )));
        }
        if let Some(l) = lambdas
            .iter()
            .find(|l| !(**l > S::zero()) || !l.is_finite())
        {
            return Err(Error::domain(format!(
                "length scale must be positive, got {l}"
            )));
        }
        Ok(KernelParams { sigma2, lambdas })
    }

    /// Unit-amplitude kernel with the given length scales.
    pub fn correlation(lambdas: Vec<S>) -> Result<Self> {
        Self::new(S::one(), lambdas)
    }

    pub fn sigma2(&self) -> S {
        self.sigma2
    }

    pub fn lambdas(&self) -> &[S] {
        &self.lambdas
    }

    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }
}

/// Lower Cholesky factor of `A + jitter_used * I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor<S> {
    lower: Array2<S>,
    jitter_used: S,
}

impl<S: Scalar> CholFactor<S> {
    /// Wraps an existing lower-triangular factor. The upper triangle is
    /// ignored by every method.
    pub fn from_lower(lower: Array2<S>, jitter_used: S) -> Result<Self> {
        if lower.nrows() != lower.ncols() {
            return Err(Error::DimensionMismatch {
                expected: lower.nrows(),
                found: lower.ncols(),
            });
        }
        Ok(CholFactor { lower, jitter_used })
    }

    pub fn lower(&self) -> &Array2<S> {
        &self.lower
    }

    pub fn jitter_used(&self) -> S {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Sum of the log diagonal, i.e. half the log-determinant.
    pub fn half_log_det(&self) -> S {
        (0..self.dim()).map(|i| self.lower[[i, i]].ln()).sum()
    }

    /// Forward substitution: solves `L x = b`.
    pub fn solve_lower(&self, b: &[S]) -> Result<Vec<S>> {
        let n = self.dim();
        check_dim(n, b.len())?;
        let mut x = b.to_vec();
        for i in 0..n {
            let row = self.lower.row(i);
            let mut s = x[i];
            for k in 0..i {
                s = s - row[k] * x[k];
            }
            x[i] = s / row[i];
        }
        Ok(x)
    }

    /// Back substitution: solves `Lᵀ x = b`.
    pub fn solve_upper(&self, b: &[S]) -> Result<Vec<S>> {
        let n = self.dim();
        check_dim(n, b.len())?;
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s = s - self.lower[[k, i]] * x[k];
            }
            x[i] = s / self.lower[[i, i]];
        }
        Ok(x)
    }

    /// Solves `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &[S]) -> Result<Vec<S>> {
        let y = self.solve_lower(b)?;
        self.solve_upper(&y)
    }

    /// Computes `L z`.
    pub fn mul_lower(&self, z: &[S]) -> Result<Vec<S>> {
        let n = self.dim();
        check_dim(n, z.len())?;
        Ok((0..n)
            .map(|i| {
                let row = self.lower.row(i);
                (0..=i).map(|k| row[k] * z[k]).sum()
            })
            .collect())
    }

    /// `‖L⁻¹ v‖²`, the quadratic form `vᵀ (L Lᵀ)⁻¹ v`.
    pub fn quad_form(&self, v: &[S]) -> Result<S> {
        Ok(self.solve_lower(v)?.iter().map(|&x| x * x).sum())
    }

    /// Factor of `c² A` given the factor of `A`.
    pub fn scaled(&self, c: S) -> Self {
        CholFactor {
            lower: self.lower.mapv(|x| x * c),
            jitter_used: self.jitter_used * c * c,
        }
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> Array2<S> {
        let n = self.dim();
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let s: S = (0..=j)
                    .map(|k| self.lower[[i, k]] * self.lower[[j, k]])
                    .sum();
                out[[i, j]] = s;
                out[[j, i]] = s;
            }
        }
        out
    }
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// One-dimensional Matérn kernel with ν = 3/2 and unit amplitude.
pub fn matern32_1d<S: Scalar>(d: S, lambda: S) -> Result<S> {
    if !(lambda > S::zero()) {
        return Err(Error::domain(format!(
            "length scale must be positive, got {lambda}"
        )));
    }
    if !(d >= S::zero()) {
        return Err(Error::domain(format!(
            "distance must be non-negative, got {d}"
        )));
    }
    let r = S::lit(3f64.sqrt()) * d / lambda;
    Ok((-r).exp() * (S::one() + r))
}

#[inline]
fn product_kernel<S: Scalar>(a: &[S], b: &[S], params: &KernelParams<S>) -> S {
    let sqrt3 = S::lit(3f64.sqrt());
    let mut sum = S::zero();
    let mut prod = S::one();
    for ((&x, &y), &l) in a.iter().zip(b).zip(&params.lambdas) {
        let r = sqrt3 * (x - y).abs() / l;
        sum = sum + r;
        prod = prod * (S::one() + r);
    }
    params.sigma2 * (-sum).exp() * prod
}

/// Product Matérn-3/2 covariance between two points.
pub fn kernel_eval<S: Scalar>(
    s: &SpatialPoint<S>,
    s2: &SpatialPoint<S>,
    params: &KernelParams<S>,
) -> Result<S> {
    check_dim(params.dim(), s.dim())?;
    check_dim(params.dim(), s2.dim())?;
    Ok(product_kernel(&s.coords, &s2.coords, params))
}

/// Covariance matrix of a set of points.
pub fn covariance_matrix<S: Scalar>(
    points: &[SpatialPoint<S>],
    params: &KernelParams<S>,
) -> Result<Array2<S>> {
    let m = points.len();
    if m == 0 {
        return Err(Error::domain("covariance matrix needs at least one point"));
    }
    for p in points {
        check_dim(params.dim(), p.dim())?;
    }
    let mut k = Array2::zeros((m, m));
    for i in 0..m {
        k[[i, i]] = params.sigma2;
        for j in 0..i {
            let v = product_kernel(&points[i].coords, &points[j].coords, params);
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    Ok(k)
}

/// Covariances between `target` and every point of `points`.
pub fn cross_covariance<S: Scalar>(
    target: &SpatialPoint<S>,
    points: &[SpatialPoint<S>],
    params: &KernelParams<S>,
) -> Result<Vec<S>> {
    check_dim(params.dim(), target.dim())?;
    points
        .iter()
        .map(|p| {
            check_dim(params.dim(), p.dim())?;
            Ok(product_kernel(&target.coords, &p.coords, params))
        })
        .collect()
}

fn try_cholesky<S: Scalar>(a: &Array2<S>, jitter: S) -> Option<Array2<S>> {
    let n = a.nrows();
    let mut l = Array2::<S>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]] + jitter;
        for k in 0..j {
            d = d - l[[j, k]] * l[[j, k]];
        }
        if !(d > S::zero()) || !d.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        l[[j, j]] = ljj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s = s - l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Some(l)
}

/// Cholesky factorization with an escalating diagonal jitter.
///
/// Tries `0, 1e-10, 1e-8, 1e-6` times the mean diagonal in turn and records
/// the jitter that succeeded.
pub fn cholesky_jittered<S: Scalar>(matrix: &Array2<S>) -> Result<CholFactor<S>> {
    let n = matrix.nrows();
    check_dim(n, matrix.ncols())?;
    if n == 0 {
        return Err(Error::domain("cannot factor an empty matrix"));
    }
    let mean_diag = (0..n).map(|i| matrix[[i, i]]).sum::<S>() / S::lit(n as f64);
    let mut max_jitter = S::zero();
    for rel in JITTER_LADDER {
        let jitter = S::lit(rel) * mean_diag;
        max_jitter = jitter;
        if let Some(lower) = try_cholesky(matrix, jitter) {
            return Ok(CholFactor {
                lower,
                jitter_used: jitter,
            });
        }
    }
    Err(Error::Singular {
        size: n,
        max_jitter: max_jitter.to_f64().unwrap_or(f64::NAN),
    })
}

/// Multivariate normal log-density with covariance `L Lᵀ`.
pub fn mvn_logpdf<S: Scalar>(x: &[S], mean: &[S], chol: &CholFactor<S>) -> Result<S> {
    let m = chol.dim();
    check_dim(m, x.len())?;
    check_dim(m, mean.len())?;
    let centered: Vec<S> = x.iter().zip(mean).map(|(&a, &b)| a - b).collect();
    let quad = chol.quad_form(&centered)?;
    let ln_2pi = S::lit((2.0 * std::f64::consts::PI).ln());
    Ok(-S::lit(m as f64 / 2.0) * ln_2pi - chol.half_log_det() - S::lit(0.5) * quad)
}

/// Draws `mean + L z` with `z` standard normal.
pub fn mvn_sample<S, R>(mean: &[S], chol: &CholFactor<S>, rng: &mut R) -> Result<Vec<S>>
where
    S: Scalar,
    R: Rng + ?Sized,
    StandardNormal: Distribution<S>,
{
    check_dim(chol.dim(), mean.len())?;
    let z: Vec<S> = (0..mean.len())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let lz = chol.mul_lower(&z)?;
    Ok(mean.iter().zip(lz).map(|(&a, b)| a + b).collect())
}
