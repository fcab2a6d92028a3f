//! Gamma and inverse-gamma blocks.
//!
//! Gamma(shape a, rate b): statistics `(x, log x)`, natural `(-b, a - 1)`.
//! InverseGamma(shape a, scale b): statistics `(1/x, log x)`, natural
//! `(-b, -(a + 1))`. Both families share the same dual structure, so the
//! mean-to-natural inversion reduces to solving `log a - psi(a) = c`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaDist};

use crate::error::{domain, Result};
use crate::special::{digamma, ln_gamma, trigamma};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Kind {
    Gamma,
    Inverse,
}

pub(super) fn shape_rate(eta: &[f64], kind: Kind) -> Result<(f64, f64)> {
    let b = -eta[0];
    let a = match kind {
        Kind::Gamma => eta[1] + 1.0,
        Kind::Inverse => -eta[1] - 1.0,
    };
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return domain(format!("gamma-family parameters out of domain: shape {a}, rate/scale {b}"));
    }
    Ok((a, b))
}

pub(super) fn natural(a: f64, b: f64, kind: Kind) -> Vec<f64> {
    match kind {
        Kind::Gamma => vec![-b, a - 1.0],
        Kind::Inverse => vec![-b, -(a + 1.0)],
    }
}

pub(super) fn mean_from_natural(eta: &[f64], kind: Kind) -> Result<Vec<f64>> {
    let (a, b) = shape_rate(eta, kind)?;
    Ok(match kind {
        Kind::Gamma => vec![a / b, digamma(a) - b.ln()],
        Kind::Inverse => vec![a / b, b.ln() - digamma(a)],
    })
}

/// Solves `log a - psi(a) = c` for `a > 0`; the left side decreases from
/// infinity to zero, so a solution exists iff `c > 0`.
pub(crate) fn solve_log_minus_digamma(c: f64) -> Result<f64> {
    if !(c > 0.0 && c.is_finite()) {
        return domain(format!("no gamma shape satisfies log a - psi(a) = {c}"));
    }
    // Minka's closed-form start, then Newton in log a.
    let mut a = (3.0 - c + ((c - 3.0).powi(2) + 24.0 * c).sqrt()) / (12.0 * c);
    for _ in 0..100 {
        let f = a.ln() - digamma(a) - c;
        let df = 1.0 / a - trigamma(a);
        // Newton on log a: d f / d log a = a * df
        let step = f / (a * df);
        let next = a * (-step).exp();
        let done = (next - a).abs() <= 1e-15 * a;
        a = next;
        if done {
            return Ok(a);
        }
    }
    Ok(a)
}

pub(super) fn natural_from_mean(m: &[f64], kind: Kind) -> Result<Vec<f64>> {
    let first = m[0];
    if !(first > 0.0) {
        return domain("gamma-family first moment must be positive");
    }
    let c = match kind {
        Kind::Gamma => first.ln() - m[1],
        Kind::Inverse => m[1] + first.ln(),
    };
    let a = solve_log_minus_digamma(c)?;
    Ok(natural(a, a / first, kind))
}

pub(super) fn covariance(eta: &[f64], kind: Kind) -> Result<DMatrix<f64>> {
    let (a, b) = shape_rate(eta, kind)?;
    let off = match kind {
        Kind::Gamma => 1.0 / b,
        Kind::Inverse => -1.0 / b,
    };
    Ok(DMatrix::from_row_slice(2, 2, &[a / (b * b), off, off, trigamma(a)]))
}

pub(super) fn log_partition(eta: &[f64], kind: Kind) -> Result<f64> {
    let (a, b) = shape_rate(eta, kind)?;
    Ok(ln_gamma(a) - a * b.ln())
}

pub(super) fn sufficient_stats(x: f64, kind: Kind) -> Result<Vec<f64>> {
    if !(x > 0.0) {
        return domain("gamma-family support is the positive half-line");
    }
    Ok(match kind {
        Kind::Gamma => vec![x, x.ln()],
        Kind::Inverse => vec![1.0 / x, x.ln()],
    })
}

pub(super) fn unconstrained_from_natural(eta: &[f64], kind: Kind) -> Result<Vec<f64>> {
    let (a, b) = shape_rate(eta, kind)?;
    Ok(vec![a.ln(), b.ln()])
}

pub(super) fn natural_from_unconstrained(u: &[f64], kind: Kind) -> (Vec<f64>, DMatrix<f64>) {
    let (a, b) = (u[0].exp(), u[1].exp());
    let da = match kind {
        Kind::Gamma => a,
        Kind::Inverse => -a,
    };
    let jac = DMatrix::from_row_slice(2, 2, &[0.0, -b, da, 0.0]);
    (natural(a, b, kind), jac)
}

pub(super) fn sample<R: Rng + ?Sized>(eta: &[f64], kind: Kind, rng: &mut R) -> Result<f64> {
    let (a, b) = shape_rate(eta, kind)?;
    let g = GammaDist::new(a, 1.0 / b).map_err(|e| crate::Error::Domain(e.to_string()))?;
    let x: f64 = g.sample(rng);
    Ok(match kind {
        Kind::Gamma => x,
        // x ~ Gamma(a, rate b) => 1/x ~ InverseGamma(a, scale b)
        Kind::Inverse => 1.0 / x,
    })
}
