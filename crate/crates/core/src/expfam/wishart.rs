//! Wishart blocks over `K x K` precision matrices `Lambda ~ Wishart(V, n)`,
//! with statistics `(vech(Lambda), log|Lambda|)`.
//!
//! Natural parameters: the vech-coded `-W/2` with `W = V^{-1}` (diagonal
//! entries `-W_ii / 2`, off-diagonal `-W_ij`), and `(n - K - 1) / 2` for the
//! log-determinant. The mean-to-natural map has no closed form; it is a
//! monotone one-dimensional root find in `n`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{domain, Result};
use crate::linalg::{inverse_pd, ln_det_pd, unvech, vech, vech_indices, vech_len};
use crate::special::{digamma, ln_gamma, multi_digamma, multi_ln_gamma, multi_trigamma, trigamma};

use super::gaussian::{chol_param_derivatives, chol_params};

pub(super) fn stat_dim(k: usize) -> usize {
    vech_len(k) + 1
}

/// Degrees of freedom and scale matrix of a Wishart distribution.
#[derive(Debug, Clone)]
pub struct WishartParams {
    pub dof: f64,
    pub scale: DMatrix<f64>,
    /// `scale^{-1}`
    pub inv_scale: DMatrix<f64>,
}

impl WishartParams {
    pub fn new(dof: f64, scale: DMatrix<f64>) -> Result<Self> {
        let k = scale.nrows();
        if !(dof > (k + 1) as f64) || !dof.is_finite() {
            return domain(format!("Wishart degrees of freedom {dof} must exceed K + 1 = {}", k + 1));
        }
        let Some(inv_scale) = inverse_pd(&scale) else {
            return domain("Wishart scale matrix is not positive definite");
        };
        Ok(Self { dof, scale, inv_scale })
    }

    pub fn dim(&self) -> usize {
        self.scale.nrows()
    }
}

fn w_from_eta(eta: &[f64], k: usize) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(k, k);
    for (a, (i, j)) in vech_indices(k).enumerate() {
        if i == j {
            w[(i, i)] = -2.0 * eta[a];
        } else {
            w[(i, j)] = -eta[a];
            w[(j, i)] = -eta[a];
        }
    }
    w
}

fn eta_vech_from_w(w: &DMatrix<f64>) -> Vec<f64> {
    vech_indices(w.nrows())
        .map(|(i, j)| if i == j { -0.5 * w[(i, i)] } else { -w[(i, j)] })
        .collect()
}

pub(super) fn decode(eta: &[f64], k: usize) -> Result<WishartParams> {
    let w = w_from_eta(&eta[..vech_len(k)], k);
    let dof = 2.0 * eta[vech_len(k)] + (k + 1) as f64;
    let Some(scale) = inverse_pd(&w) else {
        return domain("Wishart inverse scale is not positive definite");
    };
    if !(dof > (k + 1) as f64) || !dof.is_finite() {
        return domain(format!("Wishart degrees of freedom {dof} must exceed K + 1 = {}", k + 1));
    }
    Ok(WishartParams { dof, scale, inv_scale: w })
}

pub(super) fn encode(p: &WishartParams) -> Vec<f64> {
    let k = p.dim();
    let mut eta = eta_vech_from_w(&p.inv_scale);
    eta.push((p.dof - (k + 1) as f64) / 2.0);
    eta
}

pub(super) fn mean_from_natural(eta: &[f64], k: usize) -> Result<Vec<f64>> {
    let p = decode(eta, k)?;
    let mut m = vech(&(&p.scale * p.dof));
    m.push(expected_logdet(&p)?);
    Ok(m)
}

fn expected_logdet(p: &WishartParams) -> Result<f64> {
    let k = p.dim();
    let Some(ld) = ln_det_pd(&p.scale) else {
        return domain("Wishart scale matrix is not positive definite");
    };
    Ok(multi_digamma(p.dof / 2.0, k) + ld + k as f64 * std::f64::consts::LN_2)
}

/// Solves `psi_K(n/2) - K log(n/2) = c` for `n > K - 1`. The left side is
/// increasing in `n` and tends to zero, so `c < 0` is required.
fn solve_dof(c: f64, k: usize) -> Result<f64> {
    if !(c < 0.0 && c.is_finite()) {
        return domain(format!("Wishart log-determinant moment is inconsistent (gap {c})"));
    }
    let kf = k as f64;
    let f = |n: f64| multi_digamma(n / 2.0, k) - kf * (n / 2.0).ln() - c;
    let df = |n: f64| 0.5 * multi_trigamma(n / 2.0, k) - kf / n;
    // bracket in n over (K - 1, inf)
    let mut lo = kf - 1.0;
    let mut hi = kf + 1.0;
    while f(hi) < 0.0 {
        lo = hi;
        hi = 2.0 * hi + 1.0;
        if hi > 1e15 {
            return domain("Wishart degrees of freedom diverge");
        }
    }
    let mut n = 0.5 * (lo + hi);
    for _ in 0..200 {
        let v = f(n);
        if v < 0.0 {
            lo = n;
        } else {
            hi = n;
        }
        let mut next = n - v / df(n);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - n).abs() <= 1e-15 * n || hi - lo <= 1e-15 * n {
            return Ok(next);
        }
        n = next;
    }
    Ok(n)
}

pub(super) fn natural_from_mean(m: &[f64], k: usize) -> Result<Vec<f64>> {
    let mean = unvech(&m[..vech_len(k)], k);
    let Some(ld) = ln_det_pd(&mean) else {
        return domain("Wishart mean is not positive definite");
    };
    let dof = solve_dof(m[vech_len(k)] - ld, k)?;
    let scale = mean / dof;
    Ok(encode(&WishartParams::new(dof, scale)?))
}

pub(super) fn covariance(eta: &[f64], k: usize) -> Result<DMatrix<f64>> {
    let p = decode(eta, k)?;
    let v = &p.scale;
    let n = p.dof;
    let q = vech_len(k);
    let pairs: Vec<(usize, usize)> = vech_indices(k).collect();
    let mut c = DMatrix::zeros(q + 1, q + 1);
    for (a, &(i, j)) in pairs.iter().enumerate() {
        for (b, &(r, l)) in pairs.iter().enumerate() {
            c[(a, b)] = n * (v[(i, r)] * v[(j, l)] + v[(i, l)] * v[(j, r)]);
        }
        c[(a, q)] = 2.0 * v[(i, j)];
        c[(q, a)] = 2.0 * v[(i, j)];
    }
    c[(q, q)] = multi_trigamma(n / 2.0, k);
    Ok(c)
}

pub(super) fn log_partition(eta: &[f64], k: usize) -> Result<f64> {
    let p = decode(eta, k)?;
    let Some(ld) = ln_det_pd(&p.scale) else {
        return domain("Wishart scale matrix is not positive definite");
    };
    let kf = k as f64;
    Ok(p.dof * kf / 2.0 * std::f64::consts::LN_2 + p.dof / 2.0 * ld + multi_ln_gamma(p.dof / 2.0, k))
}

pub(super) fn sufficient_stats(point: &[f64], k: usize) -> Result<Vec<f64>> {
    let lam = unvech(point, k);
    let Some(ld) = ln_det_pd(&lam) else {
        return domain("Wishart support is the positive-definite cone");
    };
    let mut t = point.to_vec();
    t.push(ld);
    Ok(t)
}

/// Unconstrained coordinates `(log-Cholesky(W), log(n - K - 1))`.
pub(super) fn unconstrained_from_natural(eta: &[f64], k: usize) -> Result<Vec<f64>> {
    let p = decode(eta, k)?;
    let mut u = chol_params(&p.inv_scale)?;
    u.push((p.dof - (k + 1) as f64).ln());
    Ok(u)
}

pub(super) fn natural_from_unconstrained(u: &[f64], k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let q = vech_len(k);
    let (w, dws) = chol_param_derivatives(&u[..q], k);
    let mut eta = eta_vech_from_w(&w);
    let excess = u[q].exp();
    eta.push(excess / 2.0);
    let mut jac = DMatrix::zeros(q + 1, q + 1);
    for (col, dw) in dws.iter().enumerate() {
        for (row, v) in eta_vech_from_w(dw).into_iter().enumerate() {
            jac[(row, col)] = v;
        }
    }
    jac[(q, q)] = excess / 2.0;
    (eta, jac)
}

/// Bartlett decomposition draw, returned as `vech(Lambda)`.
pub(super) fn sample<R: Rng + ?Sized>(eta: &[f64], k: usize, rng: &mut R) -> Result<Vec<f64>> {
    let p = decode(eta, k)?;
    Ok(vech(&sample_matrix(&p, rng)?))
}

pub fn sample_matrix<R: Rng + ?Sized>(p: &WishartParams, rng: &mut R) -> Result<DMatrix<f64>> {
    let k = p.dim();
    let Some(ch) = p.scale.clone().cholesky() else {
        return domain("Wishart scale matrix is not positive definite");
    };
    let mut a = DMatrix::zeros(k, k);
    for i in 0..k {
        let chi = ChiSquared::new(p.dof - i as f64).map_err(|e| crate::Error::Domain(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let la = ch.l() * a;
    Ok(&la * la.transpose())
}

/// Closed-form expectations under `Lambda ~ Wishart(V, n)` and
/// `Sigma = Lambda^{-1}`.
#[derive(Debug, Clone, Serialize)]
pub struct WishartExpectations {
    /// `E[Lambda] = n V`
    pub mean_precision: DMatrix<f64>,
    /// `E[log |Lambda|] = psi_K(n/2) + log|V| + K log 2`
    pub logdet: f64,
    /// `E[log Sigma_kk] = log((V^{-1})_kk / 2) - psi((n - K + 1) / 2)`
    pub log_sigma_diag: DVector<f64>,
    /// `E[sqrt(Sigma_kk)]`, from the inverse-gamma marginal of `Sigma_kk`.
    pub sqrt_sigma_diag: DVector<f64>,
    /// `E[1 / Sigma_kk] = (n - K + 1) / (V^{-1})_kk`
    pub inv_sigma_diag: DVector<f64>,
    /// Inverse-Wishart mean `E[Sigma] = V^{-1} / (n - K - 1)`
    pub mean_covariance: DMatrix<f64>,
}

pub fn wishart_expectations(dof: f64, scale: &DMatrix<f64>) -> Result<WishartExpectations> {
    let p = WishartParams::new(dof, scale.clone())?;
    let k = p.dim();
    let kf = k as f64;
    // Sigma_kk ~ InverseGamma((n - K + 1) / 2, (V^{-1})_kk / 2)
    let shape = (dof - kf + 1.0) / 2.0;
    let w = &p.inv_scale;
    let log_sigma_diag = DVector::from_fn(k, |i, _| (0.5 * w[(i, i)]).ln() - digamma(shape));
    let sqrt_sigma_diag = DVector::from_fn(k, |i, _| {
        invgamma_sqrt_expectation(shape, 0.5 * w[(i, i)]).expect("shape exceeds 1/2 when n > K + 1")
    });
    let inv_sigma_diag = DVector::from_fn(k, |i, _| 2.0 * shape / w[(i, i)]);
    Ok(WishartExpectations {
        mean_precision: &p.scale * dof,
        logdet: expected_logdet(&p)?,
        log_sigma_diag,
        sqrt_sigma_diag,
        inv_sigma_diag,
        mean_covariance: w / (dof - kf - 1.0),
    })
}

/// `E[x^{1/2}]` for `x ~ InverseGamma(shape, scale)`:
/// `sqrt(scale) Gamma(shape - 1/2) / Gamma(shape)`.
pub fn invgamma_sqrt_expectation(shape: f64, scale: f64) -> Result<f64> {
    if !(shape > 0.5) || !(scale > 0.0) || !shape.is_finite() || !scale.is_finite() {
        return domain(format!("inverse-gamma square-root moment needs shape > 1/2 and scale > 0 (got {shape}, {scale})"));
    }
    Ok(scale.sqrt() * (ln_gamma(shape - 0.5) - ln_gamma(shape)).exp())
}

/// Gradient of the per-diagonal inverse-gamma marginal moments with respect
/// to the Wishart natural parameters. Returns `(d E[log Sigma_kk] / d eta,
/// d E[1/Sigma_kk] / d eta)` for each `k`.
pub fn sigma_diag_moment_gradients(eta: &[f64], k: usize) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let p = decode(eta, k)?;
    let kf = k as f64;
    let q = vech_len(k);
    let shape = (p.dof - kf + 1.0) / 2.0;
    let w = &p.inv_scale;
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let pos = crate::linalg::vech_pos(i, i, k);
        let mut dlog = vec![0.0; q + 1];
        let mut dinv = vec![0.0; q + 1];
        // W_ii = -2 eta_ii ; n = 2 eta_ld + K + 1 => shape = eta_ld + 1 + ... (d shape / d eta_ld = 1)
        dlog[pos] = -2.0 / w[(i, i)];
        dlog[q] = -trigamma(shape);
        dinv[pos] = 2.0 * shape * 2.0 / (w[(i, i)] * w[(i, i)]);
        dinv[q] = 2.0 / w[(i, i)];
        out.push((dlog, dinv));
    }
    Ok(out)
}
