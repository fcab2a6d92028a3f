//! Brute-force ground truth: closed-form conjugate posteriors, adaptive
//! quadrature, a seeded random-walk Metropolis sampler, and the
//! perturb-and-rerun comparator.

pub mod compare;
pub mod mcmc;
pub mod quadrature;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::Result;
use crate::mfvb::{ModelSpec, VarParams};

pub use compare::{perturb_and_rerun, ComparisonResult, Engine, RerunOptions};
pub use mcmc::{metropolis_sample, McmcConfig, McmcResult};
pub use quadrature::{integrate, integrate_2d, quadrature_expectation, Domain, QuadOptions, QuadResult};

/// Exact posterior moments of a conjugate model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactPosterior {
    pub names: Vec<String>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Unnormalized exact posterior in unconstrained sampler coordinates.
///
/// Coordinates are chosen so that the support is all of `R^d`; the log
/// density includes the Jacobian of that reparameterization.
pub trait PosteriorTarget: Send + Sync {
    fn coord_names(&self) -> Vec<String>;

    fn dim(&self) -> usize {
        self.coord_names().len()
    }

    /// `-inf` where the posterior vanishes.
    fn log_density(&self, x: &[f64], alpha: &[f64]) -> f64;

    /// Values of the model's tracked quantities at `x`, in the order of
    /// `LogJoint::quantities`.
    fn quantity_values(&self, x: &[f64]) -> Vec<f64>;

    /// A central point and per-coordinate scale, read off the variational
    /// approximation.
    fn locate(&self, q: &VarParams) -> (Vec<f64>, Vec<f64>);
}

/// Closed-form posterior of a conjugate model at its current hyperparameters.
pub fn exact_conjugate_posterior(model: &ModelSpec) -> Result<ExactPosterior> {
    model.exact_posterior()
}
