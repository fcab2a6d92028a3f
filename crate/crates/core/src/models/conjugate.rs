//! Conjugate fixtures with closed-form posteriors.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::fingerprint_of;
use crate::error::{domain, Error, Result};
use crate::expfam::{ExpFamBlock, Family};
use crate::linalg::{inverse_pd, ln_det_pd};
use crate::mfvb::{Layout, LogJoint, VarParams};
use crate::oracle::{ExactPosterior, PosteriorTarget};
use crate::special::{digamma, ln_gamma};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `x_i ~ N(theta, noise_var)` with a Gaussian prior on `theta` given by its
/// natural parameters `(prior_eta1, prior_eta2)`, i.e.
/// `log p(theta) = eta1 theta + eta2 theta^2 - A(eta)`.
///
/// No constants are dropped: at the optimum the ELBO equals the log
/// marginal likelihood.
#[derive(Debug, Clone)]
pub struct NormalNormal {
    data: Vec<f64>,
    noise_var: f64,
    sum: f64,
    sum_sq: f64,
    layout: Layout,
}

impl NormalNormal {
    pub const HYPERS: [&'static str; 2] = ["prior_eta1", "prior_eta2"];

    pub fn new(data: Vec<f64>, noise_var: f64) -> Result<Self> {
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return domain("noise variance must be positive");
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("observations must be finite".into()));
        }
        let sum = data.iter().sum();
        let sum_sq = data.iter().map(|x| x * x).sum();
        let layout = Layout::new([("theta", Family::GaussianUnivariate)]);
        Ok(Self { data, noise_var, sum, sum_sq, layout })
    }

    /// Natural hyperparameters of a `N(mean, var)` prior.
    pub fn prior_from_moments(mean: f64, var: f64) -> Vec<f64> {
        vec![mean / var, -0.5 / var]
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    fn prior_log_partition(alpha: &[f64]) -> f64 {
        let (e1, e2) = (alpha[0], alpha[1]);
        -e1 * e1 / (4.0 * e2) - 0.5 * (-2.0 * e2).ln() + 0.5 * LN_2PI
    }

    fn log_lik_at(&self, theta: f64) -> f64 {
        let n = self.n() as f64;
        -0.5 * n * (LN_2PI + self.noise_var.ln())
            - (self.sum_sq - 2.0 * theta * self.sum + n * theta * theta) / (2.0 * self.noise_var)
    }
}

impl LogJoint for NormalNormal {
    fn name(&self) -> &str {
        "normal_normal"
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn hyper_names(&self) -> Vec<String> {
        Self::HYPERS.iter().map(|s| s.to_string()).collect()
    }

    fn check_hyper(&self, alpha: &[f64]) -> Result<()> {
        if !(alpha[1] < 0.0) || alpha.iter().any(|a| !a.is_finite()) {
            return domain("prior_eta2 must be negative");
        }
        Ok(())
    }

    fn expected_log_lik(&self, q: &VarParams) -> Result<f64> {
        let m = q.mean();
        let n = self.n() as f64;
        Ok(-0.5 * n * (LN_2PI + self.noise_var.ln())
            - (self.sum_sq - 2.0 * m[0] * self.sum + n * m[1]) / (2.0 * self.noise_var))
    }

    fn expected_log_prior(&self, q: &VarParams, alpha: &[f64]) -> Result<f64> {
        let m = q.mean();
        Ok(alpha[0] * m[0] + alpha[1] * m[1] - Self::prior_log_partition(alpha))
    }

    fn gradient(&self, _q: &VarParams, alpha: &[f64]) -> Result<DVector<f64>> {
        let n = self.n() as f64;
        Ok(DVector::from_vec(vec![self.sum / self.noise_var + alpha[0], -0.5 * n / self.noise_var + alpha[1]]))
    }

    fn hessian(&self, _q: &VarParams, _alpha: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::zeros(2, 2))
    }

    fn hyper_cross_gradient(&self, _q: &VarParams, _alpha: &[f64], dalpha: &[f64]) -> Result<DVector<f64>> {
        if dalpha.len() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, got: dalpha.len() });
        }
        Ok(DVector::from_column_slice(dalpha))
    }

    fn initial_params(&self, alpha: &[f64]) -> Result<VarParams> {
        let b = ExpFamBlock::from_natural(Family::GaussianUnivariate, alpha)?;
        VarParams::from_blocks(&self.layout, vec![b])
    }

    fn block_prior_log_density(&self, block: usize, point: &[f64], alpha: &[f64]) -> Result<f64> {
        if block != 0 {
            return Err(Error::InvalidInput(format!("block index {block} out of range (have 1)")));
        }
        let t = point[0];
        Ok(alpha[0] * t + alpha[1] * t * t - Self::prior_log_partition(alpha))
    }

    fn fingerprint(&self) -> String {
        let mut v = vec![self.noise_var];
        v.extend(&self.data);
        fingerprint_of(self.name(), &v)
    }

    fn exact_posterior(&self, alpha: &[f64]) -> Result<ExactPosterior> {
        let prec = -2.0 * alpha[1] + self.n() as f64 / self.noise_var;
        let mean = (alpha[0] + self.sum / self.noise_var) / prec;
        Ok(ExactPosterior {
            names: vec!["theta".into()],
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, 1.0 / prec),
        })
    }

    fn posterior_target(&self) -> Option<&dyn PosteriorTarget> {
        Some(self)
    }
}

impl PosteriorTarget for NormalNormal {
    fn coord_names(&self) -> Vec<String> {
        vec!["theta".into()]
    }

    fn log_density(&self, x: &[f64], alpha: &[f64]) -> f64 {
        let t = x[0];
        alpha[0] * t + alpha[1] * t * t + self.log_lik_at(t)
    }

    fn quantity_values(&self, x: &[f64]) -> Vec<f64> {
        vec![x[0]]
    }

    fn locate(&self, q: &VarParams) -> (Vec<f64>, Vec<f64>) {
        let m = q.mean();
        (vec![m[0]], vec![(m[1] - m[0] * m[0]).max(1e-300).sqrt()])
    }
}

/// `x_i ~ N(mu, sigma2)`, `mu | sigma2 ~ N(mu0, sigma2 / kappa0)`,
/// `sigma2 ~ InverseGamma(a0, b0)`, fit with the mean-field family
/// `q(mu) q(sigma2)`. The exact posterior is normal-inverse-gamma.
#[derive(Debug, Clone)]
pub struct NormalInverseGamma {
    data: Vec<f64>,
    sum: f64,
    sum_sq: f64,
    layout: Layout,
}

impl NormalInverseGamma {
    pub const HYPERS: [&'static str; 4] = ["mu0", "kappa0", "a0", "b0"];

    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("observations must be finite".into()));
        }
        let sum = data.iter().sum();
        let sum_sq = data.iter().map(|x| x * x).sum();
        let layout = Layout::new([("mu", Family::GaussianUnivariate), ("sigma2", Family::InverseGamma)]);
        Ok(Self { data, sum, sum_sq, layout })
    }

    fn n(&self) -> f64 {
        self.data.len() as f64
    }

    /// Posterior `(mu_n, kappa_n, a_n, b_n)`.
    pub fn posterior_params(&self, alpha: &[f64]) -> (f64, f64, f64, f64) {
        let (mu0, k0, a0, b0) = (alpha[0], alpha[1], alpha[2], alpha[3]);
        let kn = k0 + self.n();
        let mn = (k0 * mu0 + self.sum) / kn;
        let an = a0 + 0.5 * self.n();
        let bn = b0 + 0.5 * (self.sum_sq + k0 * mu0 * mu0 - kn * mn * mn);
        (mn, kn, an, bn)
    }

    // -(sum (x - mu)^2) / 2 and -kappa0 (mu - mu0)^2 / 2, in expectation
    // over q(mu), as coefficients of E[1 / sigma2]
    fn quad_terms(&self, m1: f64, m2: f64, alpha: &[f64]) -> (f64, f64) {
        let (mu0, k0) = (alpha[0], alpha[1]);
        let lik = self.sum_sq - 2.0 * m1 * self.sum + self.n() * m2;
        let pri = k0 * (m2 - 2.0 * mu0 * m1 + mu0 * mu0);
        (lik, pri)
    }
}

impl LogJoint for NormalInverseGamma {
    fn name(&self) -> &str {
        "normal_inverse_gamma"
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn hyper_names(&self) -> Vec<String> {
        Self::HYPERS.iter().map(|s| s.to_string()).collect()
    }

    fn check_hyper(&self, alpha: &[f64]) -> Result<()> {
        if alpha.iter().any(|a| !a.is_finite()) || !(alpha[1] > 0.0 && alpha[2] > 0.0 && alpha[3] > 0.0) {
            return domain("kappa0, a0 and b0 must be positive");
        }
        Ok(())
    }

    fn expected_log_lik(&self, q: &VarParams) -> Result<f64> {
        let m = q.mean();
        let (lik, _) = self.quad_terms(m[0], m[1], &[0.0, 0.0]);
        let n = self.n();
        Ok(-0.5 * n * LN_2PI - 0.5 * n * m[3] - 0.5 * m[2] * lik)
    }

    fn expected_log_prior(&self, q: &VarParams, alpha: &[f64]) -> Result<f64> {
        let m = q.mean();
        let (_, pri) = self.quad_terms(m[0], m[1], alpha);
        let (k0, a0, b0) = (alpha[1], alpha[2], alpha[3]);
        let mu_part = -0.5 * LN_2PI + 0.5 * k0.ln() - 0.5 * m[3] - 0.5 * m[2] * pri;
        let s_part = a0 * b0.ln() - ln_gamma(a0) - (a0 + 1.0) * m[3] - b0 * m[2];
        Ok(mu_part + s_part)
    }

    fn gradient(&self, q: &VarParams, alpha: &[f64]) -> Result<DVector<f64>> {
        let m = q.mean();
        let (mu0, k0, a0, b0) = (alpha[0], alpha[1], alpha[2], alpha[3]);
        let (lik, pri) = self.quad_terms(m[0], m[1], alpha);
        let n = self.n();
        let r = m[2];
        Ok(DVector::from_vec(vec![
            r * (self.sum + k0 * mu0),
            -0.5 * r * (n + k0),
            -0.5 * (lik + pri) - b0,
            -0.5 * n - 0.5 - (a0 + 1.0),
        ]))
    }

    fn hessian(&self, _q: &VarParams, alpha: &[f64]) -> Result<DMatrix<f64>> {
        let (mu0, k0) = (alpha[0], alpha[1]);
        let mut h = DMatrix::zeros(4, 4);
        h[(0, 2)] = self.sum + k0 * mu0;
        h[(2, 0)] = h[(0, 2)];
        h[(1, 2)] = -0.5 * (self.n() + k0);
        h[(2, 1)] = h[(1, 2)];
        Ok(h)
    }

    fn hyper_cross_gradient(&self, q: &VarParams, alpha: &[f64], dalpha: &[f64]) -> Result<DVector<f64>> {
        if dalpha.len() != 4 {
            return Err(Error::DimensionMismatch { expected: 4, got: dalpha.len() });
        }
        let m = q.mean();
        let (mu0, k0) = (alpha[0], alpha[1]);
        let r = m[2];
        // rows: d/dm of dL/dmu0, dL/dkappa0, dL/da0, dL/db0
        let cols = [
            [k0 * r, 0.0, k0 * (m[0] - mu0), 0.0],
            [mu0 * r, -0.5 * r, -0.5 * (m[1] - 2.0 * mu0 * m[0] + mu0 * mu0), 0.0],
            [0.0, 0.0, 0.0, -1.0],
            [0.0, 0.0, -1.0, 0.0],
        ];
        let mut g = DVector::zeros(4);
        for (c, d) in cols.iter().zip(dalpha) {
            for i in 0..4 {
                g[i] += c[i] * d;
            }
        }
        Ok(g)
    }

    fn initial_params(&self, alpha: &[f64]) -> Result<VarParams> {
        let (mu0, k0, a0, b0) = (alpha[0], alpha[1], alpha[2], alpha[3]);
        let mu = ExpFamBlock::gaussian(mu0, b0 / (a0 * k0))?;
        let s = ExpFamBlock::inverse_gamma(a0, b0)?;
        VarParams::from_blocks(&self.layout, vec![mu, s])
    }

    fn block_prior_log_density(&self, block: usize, point: &[f64], alpha: &[f64]) -> Result<f64> {
        match block {
            // the conditional prior on mu depends on sigma2
            0 => Err(Error::NotFactorized(0)),
            1 => {
                let (a0, b0) = (alpha[2], alpha[3]);
                let x = point[0];
                if !(x > 0.0) {
                    return Ok(f64::NEG_INFINITY);
                }
                Ok(a0 * b0.ln() - ln_gamma(a0) - (a0 + 1.0) * x.ln() - b0 / x)
            }
            _ => Err(Error::InvalidInput(format!("block index {block} out of range (have 2)"))),
        }
    }

    fn fingerprint(&self) -> String {
        fingerprint_of(self.name(), &self.data)
    }

    fn exact_posterior(&self, alpha: &[f64]) -> Result<ExactPosterior> {
        let (mn, kn, an, bn) = self.posterior_params(alpha);
        if !(an > 2.0) {
            return domain("posterior shape must exceed 2 for finite second moments");
        }
        let es = bn / (an - 1.0);
        let cov = DMatrix::from_row_slice(2, 2, &[es / kn, 0.0, 0.0, es * es / (an - 2.0)]);
        Ok(ExactPosterior {
            names: vec!["mu".into(), "sigma2".into()],
            mean: DVector::from_vec(vec![mn, es]),
            cov,
        })
    }

    fn posterior_target(&self) -> Option<&dyn PosteriorTarget> {
        Some(self)
    }
}

impl PosteriorTarget for NormalInverseGamma {
    /// `(mu, log sigma2)`.
    fn coord_names(&self) -> Vec<String> {
        vec!["mu".into(), "log_sigma2".into()]
    }

    fn log_density(&self, x: &[f64], alpha: &[f64]) -> f64 {
        let (mu0, k0, a0, b0) = (alpha[0], alpha[1], alpha[2], alpha[3]);
        let (mu, ls) = (x[0], x[1]);
        let inv = (-ls).exp();
        let n = self.n();
        let sse = self.sum_sq - 2.0 * mu * self.sum + n * mu * mu;
        let lik = -0.5 * n * ls - 0.5 * inv * sse;
        let pmu = -0.5 * ls - 0.5 * k0 * inv * (mu - mu0).powi(2);
        // log sigma2 coordinate: density picks up the Jacobian sigma2
        let ps = -(a0 + 1.0) * ls - b0 * inv + ls;
        lik + pmu + ps
    }

    fn quantity_values(&self, x: &[f64]) -> Vec<f64> {
        vec![x[0]]
    }

    fn locate(&self, q: &VarParams) -> (Vec<f64>, Vec<f64>) {
        let m = q.mean();
        let (a, b) = q.block(1).gamma_params().expect("inverse-gamma block");
        // log sigma2 under q: mean log b - psi(a), sd sqrt(trigamma(a))
        let sd_ls = crate::special::trigamma(a).sqrt();
        (vec![m[0], b.ln() - digamma(a)], vec![(m[1] - m[0] * m[0]).max(1e-300).sqrt(), sd_ls])
    }
}

/// Multivariate Gaussian target `N(loc, Lambda^{-1})` with no data, fit
/// with one univariate Gaussian factor per coordinate. The hyperparameters
/// are the location vector.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    precision: DMatrix<f64>,
    ln_det: f64,
    layout: Layout,
}

impl GaussianTarget {
    pub fn new(precision: DMatrix<f64>) -> Result<Self> {
        let d = precision.nrows();
        if d == 0 || precision.ncols() != d {
            return Err(Error::InvalidInput("precision must be a non-empty square matrix".into()));
        }
        if (&precision - precision.transpose()).amax() > 1e-12 * precision.amax() {
            return domain("precision must be symmetric");
        }
        let Some(ln_det) = ln_det_pd(&precision) else {
            return domain("precision must be positive definite");
        };
        let layout = Layout::new((0..d).map(|i| (format!("theta[{i}]"), Family::GaussianUnivariate)));
        Ok(Self { precision, ln_det, layout })
    }

    pub fn dim(&self) -> usize {
        self.precision.nrows()
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    fn means(&self, m: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| m[2 * i])
    }
}

impl LogJoint for GaussianTarget {
    fn name(&self) -> &str {
        "gaussian_target"
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn hyper_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("loc[{i}]")).collect()
    }

    fn check_hyper(&self, alpha: &[f64]) -> Result<()> {
        if alpha.iter().any(|a| !a.is_finite()) {
            return domain("location must be finite");
        }
        Ok(())
    }

    fn expected_log_lik(&self, _q: &VarParams) -> Result<f64> {
        Ok(0.0)
    }

    fn expected_log_prior(&self, q: &VarParams, alpha: &[f64]) -> Result<f64> {
        let m = q.mean();
        let d = self.dim();
        let a = DVector::from_column_slice(alpha);
        let la = &self.precision * &a;
        let mut v = 0.5 * self.ln_det - 0.5 * d as f64 * LN_2PI - 0.5 * a.dot(&la);
        for i in 0..d {
            v += la[i] * m[2 * i] - 0.5 * self.precision[(i, i)] * m[2 * i + 1];
            for j in 0..i {
                v -= self.precision[(i, j)] * m[2 * i] * m[2 * j];
            }
        }
        Ok(v)
    }

    fn gradient(&self, q: &VarParams, alpha: &[f64]) -> Result<DVector<f64>> {
        let m = q.mean();
        let d = self.dim();
        let mu = self.means(m);
        let la = &self.precision * DVector::from_column_slice(alpha);
        let lm = &self.precision * &mu;
        let mut g = DVector::zeros(2 * d);
        for i in 0..d {
            let lii = self.precision[(i, i)];
            g[2 * i] = la[i] - (lm[i] - lii * mu[i]);
            g[2 * i + 1] = -0.5 * lii;
        }
        Ok(g)
    }

    fn hessian(&self, _q: &VarParams, _alpha: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mut h = DMatrix::zeros(2 * d, 2 * d);
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    h[(2 * i, 2 * j)] = -self.precision[(i, j)];
                }
            }
        }
        Ok(h)
    }

    fn hyper_cross_gradient(&self, _q: &VarParams, _alpha: &[f64], dalpha: &[f64]) -> Result<DVector<f64>> {
        let d = self.dim();
        if dalpha.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: dalpha.len() });
        }
        let ld = &self.precision * DVector::from_column_slice(dalpha);
        let mut g = DVector::zeros(2 * d);
        for i in 0..d {
            g[2 * i] = ld[i];
        }
        Ok(g)
    }

    fn initial_params(&self, alpha: &[f64]) -> Result<VarParams> {
        let blocks = (0..self.dim())
            .map(|i| ExpFamBlock::gaussian(alpha[i], 1.0 / self.precision[(i, i)]))
            .collect::<Result<Vec<_>>>()?;
        VarParams::from_blocks(&self.layout, blocks)
    }

    fn block_prior_log_density(&self, block: usize, point: &[f64], alpha: &[f64]) -> Result<f64> {
        let d = self.dim();
        if block >= d {
            return Err(Error::InvalidInput(format!("block index {block} out of range (have {d})")));
        }
        let coupled = (0..d).any(|j| j != block && self.precision[(block, j)] != 0.0);
        if coupled {
            return Err(Error::NotFactorized(block));
        }
        let lii = self.precision[(block, block)];
        let z = point[0] - alpha[block];
        Ok(0.5 * (lii / (2.0 * PI)).ln() - 0.5 * lii * z * z)
    }

    fn fingerprint(&self) -> String {
        fingerprint_of(self.name(), self.precision.as_slice())
    }

    fn exact_posterior(&self, alpha: &[f64]) -> Result<ExactPosterior> {
        let Some(cov) = inverse_pd(&self.precision) else {
            return domain("precision must be positive definite");
        };
        Ok(ExactPosterior {
            names: (0..self.dim()).map(|i| format!("theta[{i}]")).collect(),
            mean: DVector::from_column_slice(alpha),
            cov,
        })
    }

    fn posterior_target(&self) -> Option<&dyn PosteriorTarget> {
        Some(self)
    }
}

impl PosteriorTarget for GaussianTarget {
    fn coord_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("theta[{i}]")).collect()
    }

    fn log_density(&self, x: &[f64], alpha: &[f64]) -> f64 {
        let z = DVector::from_fn(self.dim(), |i, _| x[i] - alpha[i]);
        -0.5 * z.dot(&(&self.precision * &z))
    }

    fn quantity_values(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn locate(&self, q: &VarParams) -> (Vec<f64>, Vec<f64>) {
        let m = q.mean();
        let d = self.dim();
        let center = (0..d).map(|i| m[2 * i]).collect();
        let scale = (0..d).map(|i| (m[2 * i + 1] - m[2 * i] * m[2 * i]).max(1e-300).sqrt()).collect();
        (center, scale)
    }
}
