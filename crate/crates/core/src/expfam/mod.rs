//! Exponential-family factors of the mean-field approximation.
//!
//! Every family is minimal with base measure 1 (Lebesgue), so the negative
//! entropy is the convex dual of the log partition and its Hessian in mean
//! coordinates is the inverse of [`suff_stat_covariance`].
//!
//! Sufficient-statistic layouts (fixed; `V` and `H` are assembled in this
//! order):
//!
//! | family                    | statistics                        |
//! |---------------------------|-----------------------------------|
//! | `GaussianUnivariate`      | `(x, x^2)`                        |
//! | `GaussianMultivariate{d}` | `(x, vech(x x^T))`                |
//! | `Gamma`                   | `(x, log x)`                      |
//! | `InverseGamma`            | `(1/x, log x)`                    |
//! | `Wishart{k}`              | `(vech(Lambda), log|Lambda|)`     |
//!
//! Points of the support are passed as flat slices: the vector `x` for
//! Gaussians, `[x]` for the gamma families, and `vech(Lambda)` for Wishart.

mod gamma;
mod gaussian;
pub mod wishart;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::{vech, vech_len};

pub use wishart::{
    invgamma_sqrt_expectation, sample_matrix as sample_wishart, wishart_expectations, WishartExpectations,
    WishartParams,
};

use gamma::Kind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    GaussianUnivariate,
    GaussianMultivariate { dim: usize },
    Gamma,
    InverseGamma,
    Wishart { dim: usize },
}

impl Family {
    /// Length of the sufficient-statistic (and natural/mean parameter) vector.
    pub fn stat_dim(&self) -> usize {
        match *self {
            Family::GaussianUnivariate => 2,
            Family::GaussianMultivariate { dim } => gaussian::stat_dim(dim),
            Family::Gamma | Family::InverseGamma => 2,
            Family::Wishart { dim } => wishart::stat_dim(dim),
        }
    }

    /// Length of the flat representation of a support point.
    pub fn point_dim(&self) -> usize {
        match *self {
            Family::GaussianUnivariate => 1,
            Family::GaussianMultivariate { dim } => dim,
            Family::Gamma | Family::InverseGamma => 1,
            Family::Wishart { dim } => vech_len(dim),
        }
    }

    fn gaussian_dim(&self) -> Option<usize> {
        match *self {
            Family::GaussianUnivariate => Some(1),
            Family::GaussianMultivariate { dim } => Some(dim),
            _ => None,
        }
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.stat_dim() {
            return Err(Error::DimensionMismatch { expected: self.stat_dim(), got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return domain("non-finite parameter");
        }
        Ok(())
    }

    pub fn mean_from_natural(&self, eta: &[f64]) -> Result<Vec<f64>> {
        self.check_len(eta)?;
        match *self {
            Family::Gamma => gamma::mean_from_natural(eta, Kind::Gamma),
            Family::InverseGamma => gamma::mean_from_natural(eta, Kind::Inverse),
            Family::Wishart { dim } => wishart::mean_from_natural(eta, dim),
            _ => gaussian::mean_from_natural(eta, self.gaussian_dim().unwrap()),
        }
    }

    pub fn natural_from_mean(&self, m: &[f64]) -> Result<Vec<f64>> {
        self.check_len(m)?;
        match *self {
            Family::Gamma => gamma::natural_from_mean(m, Kind::Gamma),
            Family::InverseGamma => gamma::natural_from_mean(m, Kind::Inverse),
            Family::Wishart { dim } => wishart::natural_from_mean(m, dim),
            _ => gaussian::natural_from_mean(m, self.gaussian_dim().unwrap()),
        }
    }

    /// Covariance of the sufficient statistics, i.e. the Hessian of the log
    /// partition at `eta`.
    pub fn suff_stat_covariance(&self, eta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_len(eta)?;
        match *self {
            Family::Gamma => gamma::covariance(eta, Kind::Gamma),
            Family::InverseGamma => gamma::covariance(eta, Kind::Inverse),
            Family::Wishart { dim } => wishart::covariance(eta, dim),
            _ => gaussian::covariance(eta, self.gaussian_dim().unwrap()),
        }
    }

    pub fn log_partition(&self, eta: &[f64]) -> Result<f64> {
        self.check_len(eta)?;
        match *self {
            Family::Gamma => gamma::log_partition(eta, Kind::Gamma),
            Family::InverseGamma => gamma::log_partition(eta, Kind::Inverse),
            Family::Wishart { dim } => wishart::log_partition(eta, dim),
            _ => gaussian::log_partition(eta, self.gaussian_dim().unwrap()),
        }
    }

    /// Differential entropy `-E[log q] = A(eta) - eta . m`.
    pub fn entropy(&self, eta: &[f64]) -> Result<f64> {
        let m = self.mean_from_natural(eta)?;
        let a = self.log_partition(eta)?;
        Ok(a - eta.iter().zip(&m).map(|(e, m)| e * m).sum::<f64>())
    }

    pub fn sufficient_stats(&self, point: &[f64]) -> Result<Vec<f64>> {
        if point.len() != self.point_dim() {
            return Err(Error::DimensionMismatch { expected: self.point_dim(), got: point.len() });
        }
        match *self {
            Family::Gamma => gamma::sufficient_stats(point[0], Kind::Gamma),
            Family::InverseGamma => gamma::sufficient_stats(point[0], Kind::Inverse),
            Family::Wishart { dim } => wishart::sufficient_stats(point, dim),
            _ => Ok(gaussian::sufficient_stats(point, self.gaussian_dim().unwrap())),
        }
    }

    /// `log q(point) = eta . t(point) - A(eta)`.
    pub fn log_density(&self, eta: &[f64], point: &[f64]) -> Result<f64> {
        let t = self.sufficient_stats(point)?;
        let a = self.log_partition(eta)?;
        Ok(eta.iter().zip(&t).map(|(e, t)| e * t).sum::<f64>() - a)
    }

    /// Unconstrained optimizer coordinates: log-transformed positive scalars
    /// and log-Cholesky factors of positive-definite matrices.
    pub fn unconstrained_from_natural(&self, eta: &[f64]) -> Result<Vec<f64>> {
        self.check_len(eta)?;
        match *self {
            Family::Gamma => gamma::unconstrained_from_natural(eta, Kind::Gamma),
            Family::InverseGamma => gamma::unconstrained_from_natural(eta, Kind::Inverse),
            Family::Wishart { dim } => wishart::unconstrained_from_natural(eta, dim),
            _ => gaussian::unconstrained_from_natural(eta, self.gaussian_dim().unwrap()),
        }
    }

    /// Natural parameters and Jacobian `d eta / d u` at unconstrained `u`.
    pub fn natural_from_unconstrained(&self, u: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        match *self {
            Family::Gamma => gamma::natural_from_unconstrained(u, Kind::Gamma),
            Family::InverseGamma => gamma::natural_from_unconstrained(u, Kind::Inverse),
            Family::Wishart { dim } => wishart::natural_from_unconstrained(u, dim),
            _ => gaussian::natural_from_unconstrained(u, self.gaussian_dim().unwrap()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, eta: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.check_len(eta)?;
        match *self {
            Family::Gamma => Ok(vec![gamma::sample(eta, Kind::Gamma, rng)?]),
            Family::InverseGamma => Ok(vec![gamma::sample(eta, Kind::Inverse, rng)?]),
            Family::Wishart { dim } => wishart::sample(eta, dim, rng),
            _ => gaussian::sample(eta, self.gaussian_dim().unwrap(), rng),
        }
    }
}

/// One factor of the mean-field approximation, holding both coordinate
/// systems. Constructors guarantee the two are consistent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpFamBlock {
    pub family: Family,
    pub natural: DVector<f64>,
    pub mean: DVector<f64>,
}

impl ExpFamBlock {
    pub fn from_natural(family: Family, eta: &[f64]) -> Result<Self> {
        let mean = family.mean_from_natural(eta)?;
        Ok(Self { family, natural: DVector::from_column_slice(eta), mean: DVector::from_vec(mean) })
    }

    pub fn from_mean(family: Family, m: &[f64]) -> Result<Self> {
        let eta = family.natural_from_mean(m)?;
        Ok(Self { family, natural: DVector::from_vec(eta), mean: DVector::from_column_slice(m) })
    }

    pub fn from_unconstrained(family: Family, u: &[f64]) -> Result<Self> {
        let (eta, _) = family.natural_from_unconstrained(u);
        Self::from_natural(family, &eta)
    }

    pub fn gaussian(mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0) {
            return domain("Gaussian variance must be positive");
        }
        Self::from_natural(Family::GaussianUnivariate, &[mean / var, -0.5 / var])
    }

    pub fn gaussian_mv(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        let Some(precision) = crate::linalg::inverse_pd(cov) else {
            return domain("Gaussian covariance is not positive definite");
        };
        let family = if d == 1 { Family::GaussianUnivariate } else { Family::GaussianMultivariate { dim: d } };
        Self::from_natural(family, &gaussian::encode(mean, &precision))
    }

    pub fn gamma(shape: f64, rate: f64) -> Result<Self> {
        Self::from_natural(Family::Gamma, &gamma::natural(shape, rate, Kind::Gamma))
    }

    pub fn inverse_gamma(shape: f64, scale: f64) -> Result<Self> {
        Self::from_natural(Family::InverseGamma, &gamma::natural(shape, scale, Kind::Inverse))
    }

    pub fn wishart(dof: f64, scale: &DMatrix<f64>) -> Result<Self> {
        let p = WishartParams::new(dof, scale.clone())?;
        Self::from_natural(Family::Wishart { dim: p.dim() }, &wishart::encode(&p))
    }

    pub fn dim(&self) -> usize {
        self.family.stat_dim()
    }

    pub fn suff_stat_covariance(&self) -> Result<DMatrix<f64>> {
        self.family.suff_stat_covariance(self.natural.as_slice())
    }

    pub fn entropy(&self) -> Result<f64> {
        let a = self.family.log_partition(self.natural.as_slice())?;
        Ok(a - self.natural.dot(&self.mean))
    }

    pub fn log_density(&self, point: &[f64]) -> Result<f64> {
        self.family.log_density(self.natural.as_slice(), point)
    }

    pub fn unconstrained(&self) -> Result<Vec<f64>> {
        self.family.unconstrained_from_natural(self.natural.as_slice())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        self.family.sample(self.natural.as_slice(), rng)
    }

    /// Gaussian mean vector and covariance, if this is a Gaussian block.
    pub fn gaussian_moments(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let d = self.family.gaussian_dim()?;
        let mo = gaussian::decode(self.natural.as_slice(), d).ok()?;
        Some((mo.mean, mo.cov))
    }

    /// `(shape, rate)` for gamma blocks or `(shape, scale)` for inverse-gamma.
    pub fn gamma_params(&self) -> Option<(f64, f64)> {
        let kind = match self.family {
            Family::Gamma => Kind::Gamma,
            Family::InverseGamma => Kind::Inverse,
            _ => return None,
        };
        gamma::shape_rate(self.natural.as_slice(), kind).ok()
    }

    pub fn wishart_params(&self) -> Option<WishartParams> {
        match self.family {
            Family::Wishart { dim } => wishart::decode(self.natural.as_slice(), dim).ok(),
            _ => None,
        }
    }
}

/// Stats of a Gaussian point in the block layout.
pub fn gaussian_stats(x: &[f64]) -> Vec<f64> {
    gaussian::sufficient_stats(x, x.len())
}

pub fn wishart_point(lambda: &DMatrix<f64>) -> Vec<f64> {
    vech(lambda)
}

#[cfg(test)]
mod tests;
