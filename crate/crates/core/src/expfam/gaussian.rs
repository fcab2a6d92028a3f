//! Gaussian blocks in `d` dimensions with sufficient statistics
//! `(theta, vech(theta theta^T))`. The univariate case is `d = 1`, whose
//! layout is `(theta, theta^2)`.
//!
//! Natural parameters are `(P mu, vech-coded -P/2)`, where the vech coding
//! stores `-P_ii / 2` on the diagonal and `-P_ij` off it, so that
//! `eta . t(theta) = theta^T P mu - theta^T P theta / 2`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{domain, Result};
use crate::linalg::{inverse_pd, ln_det_pd, unvech, vech, vech_indices, vech_len};

pub(super) fn stat_dim(d: usize) -> usize {
    d + vech_len(d)
}

/// Mean vector and precision matrix decoded from natural parameters.
pub(super) struct Moments {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub cov: DMatrix<f64>,
}

fn precision_from_eta(eta2: &[f64], d: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(d, d);
    for (k, (i, j)) in vech_indices(d).enumerate() {
        if i == j {
            p[(i, i)] = -2.0 * eta2[k];
        } else {
            p[(i, j)] = -eta2[k];
            p[(j, i)] = -eta2[k];
        }
    }
    p
}

fn eta_from_precision(p: &DMatrix<f64>) -> Vec<f64> {
    vech_indices(p.nrows())
        .map(|(i, j)| if i == j { -0.5 * p[(i, i)] } else { -p[(i, j)] })
        .collect()
}

pub(super) fn decode(eta: &[f64], d: usize) -> Result<Moments> {
    let precision = precision_from_eta(&eta[d..], d);
    let Some(cov) = inverse_pd(&precision) else {
        return domain("Gaussian precision is not positive definite");
    };
    let mean = &cov * DVector::from_column_slice(&eta[..d]);
    Ok(Moments { mean, precision, cov })
}

pub(super) fn encode(mean: &DVector<f64>, precision: &DMatrix<f64>) -> Vec<f64> {
    let mut eta: Vec<f64> = (precision * mean).iter().copied().collect();
    eta.extend(eta_from_precision(precision));
    eta
}

pub(super) fn mean_from_natural(eta: &[f64], d: usize) -> Result<Vec<f64>> {
    let mo = decode(eta, d)?;
    let second = &mo.cov + &mo.mean * mo.mean.transpose();
    let mut m: Vec<f64> = mo.mean.iter().copied().collect();
    m.extend(vech(&second));
    Ok(m)
}

pub(super) fn natural_from_mean(m: &[f64], d: usize) -> Result<Vec<f64>> {
    let mean = DVector::from_column_slice(&m[..d]);
    let cov = unvech(&m[d..], d) - &mean * mean.transpose();
    let Some(precision) = inverse_pd(&cov) else {
        return domain("Gaussian second moment minus outer product of mean is not positive definite");
    };
    Ok(encode(&mean, &precision))
}

pub(super) fn covariance(eta: &[f64], d: usize) -> Result<DMatrix<f64>> {
    let mo = decode(eta, d)?;
    let mu = &mo.mean;
    let s = &mo.cov;
    let n = stat_dim(d);
    let mut c = DMatrix::zeros(n, n);
    for i in 0..d {
        for j in 0..d {
            c[(i, j)] = s[(i, j)];
        }
    }
    let pairs: Vec<(usize, usize)> = vech_indices(d).collect();
    for (a, &(j, l)) in pairs.iter().enumerate() {
        for i in 0..d {
            // Cov(x_i, x_j x_l)
            let v = mu[j] * s[(i, l)] + mu[l] * s[(i, j)];
            c[(i, d + a)] = v;
            c[(d + a, i)] = v;
        }
        for (b, &(k, r)) in pairs.iter().enumerate() {
            // Cov(x_j x_l, x_k x_r) for a non-central Gaussian
            c[(d + a, d + b)] = s[(j, k)] * s[(l, r)]
                + s[(j, r)] * s[(l, k)]
                + mu[j] * mu[k] * s[(l, r)]
                + mu[j] * mu[r] * s[(l, k)]
                + mu[l] * mu[k] * s[(j, r)]
                + mu[l] * mu[r] * s[(j, k)];
        }
    }
    Ok(c)
}

pub(super) fn log_partition(eta: &[f64], d: usize) -> Result<f64> {
    let mo = decode(eta, d)?;
    let quad = (mo.mean.transpose() * &mo.precision * &mo.mean)[(0, 0)];
    let Some(ld) = ln_det_pd(&mo.precision) else {
        return domain("Gaussian precision is not positive definite");
    };
    Ok(0.5 * quad - 0.5 * ld + 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln())
}

pub(super) fn sufficient_stats(x: &[f64], d: usize) -> Vec<f64> {
    let mut t = x.to_vec();
    t.extend(vech_indices(d).map(|(i, j)| x[i] * x[j]));
    t
}

/// Lower-triangular factor of the precision with log-transformed diagonal.
fn chol_from_params(params: &[f64], d: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(d, d);
    for (k, (i, j)) in vech_indices(d).enumerate() {
        l[(i, j)] = if i == j { params[k].exp() } else { params[k] };
    }
    l
}

pub(super) fn chol_params(pd: &DMatrix<f64>) -> Result<Vec<f64>> {
    let Some(ch) = pd.clone().cholesky() else {
        return domain("matrix is not positive definite");
    };
    let l = ch.l();
    Ok(vech_indices(pd.nrows())
        .map(|(i, j)| if i == j { l[(i, i)].ln() } else { l[(i, j)] })
        .collect())
}

/// Derivatives of `P = L L^T` with respect to the log-Cholesky parameters.
pub(super) fn chol_param_derivatives(params: &[f64], d: usize) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let l = chol_from_params(params, d);
    let derivs = vech_indices(d)
        .map(|(i, j)| {
            let mut dl = DMatrix::zeros(d, d);
            dl[(i, j)] = if i == j { l[(i, i)] } else { 1.0 };
            &dl * l.transpose() + &l * dl.transpose()
        })
        .collect();
    (&l * l.transpose(), derivs)
}

/// Unconstrained coordinates `(mu, log-Cholesky(P))`.
pub(super) fn unconstrained_from_natural(eta: &[f64], d: usize) -> Result<Vec<f64>> {
    let mo = decode(eta, d)?;
    let mut u: Vec<f64> = mo.mean.iter().copied().collect();
    u.extend(chol_params(&mo.precision)?);
    Ok(u)
}

pub(super) fn natural_from_unconstrained(u: &[f64], d: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mean = DVector::from_column_slice(&u[..d]);
    let (p, dps) = chol_param_derivatives(&u[d..], d);
    let eta = encode(&mean, &p);
    let n = stat_dim(d);
    let mut jac = DMatrix::zeros(n, n);
    // d(P mu)/d mu = P
    for i in 0..d {
        for j in 0..d {
            jac[(i, j)] = p[(i, j)];
        }
    }
    for (k, dp) in dps.iter().enumerate() {
        let col = d + k;
        let dmu = dp * &mean;
        for i in 0..d {
            jac[(i, col)] = dmu[i];
        }
        for (a, v) in eta_from_precision(dp).into_iter().enumerate() {
            jac[(d + a, col)] = v;
        }
    }
    (eta, jac)
}

pub(super) fn sample<R: Rng + ?Sized>(eta: &[f64], d: usize, rng: &mut R) -> Result<Vec<f64>> {
    let mo = decode(eta, d)?;
    let Some(ch) = mo.cov.clone().cholesky() else {
        return domain("Gaussian covariance is not positive definite");
    };
    let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok((mo.mean + ch.l() * z).iter().copied().collect())
}
