//! Gamma-family special functions used by the exponential-family blocks.
//!
//! `ln_gamma` delegates to statrs (Lanczos, ~1e-15 relative). Digamma and
//! trigamma use upward recurrence to `x >= 10` followed by the asymptotic
//! Bernoulli series, which keeps the absolute error below 1e-13 for positive
//! arguments.

use std::f64::consts::PI;

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

pub fn digamma(x: f64) -> f64 {
    if x.is_nan() || x == f64::NEG_INFINITY {
        return f64::NAN;
    }
    if x <= 0.0 {
        if x == x.floor() {
            return f64::NAN;
        }
        // reflection: psi(1 - x) - psi(x) = pi cot(pi x)
        return digamma(1.0 - x) - PI / (PI * x).tan();
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - series
}

pub fn trigamma(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        if x == x.floor() {
            return f64::NAN;
        }
        let s = (PI * x).sin();
        return -trigamma(1.0 - x) + PI * PI / (s * s);
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/(2x^2) + sum B_2k / x^(2k+1)
    let series = inv
        * (1.0
            + inv2
                * (1.0 / 6.0
                    - inv2
                        * (1.0 / 30.0
                            - inv2
                                * (1.0 / 42.0
                                    - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * 691.0 / 2730.0))))));
    acc + series + 0.5 * inv2
}

/// Multivariate digamma `sum_{i=1}^{p} psi(a + (1 - i) / 2)`.
pub fn multi_digamma(a: f64, p: usize) -> f64 {
    (1..=p).map(|i| digamma(a + (1.0 - i as f64) / 2.0)).sum()
}

/// Derivative of [`multi_digamma`] in `a`.
pub fn multi_trigamma(a: f64, p: usize) -> f64 {
    (1..=p).map(|i| trigamma(a + (1.0 - i as f64) / 2.0)).sum()
}

/// Log of the multivariate gamma function `Gamma_p(a)`.
pub fn multi_ln_gamma(a: f64, p: usize) -> f64 {
    let pf = p as f64;
    pf * (pf - 1.0) / 4.0 * PI.ln()
        + (1..=p).map(|i| ln_gamma(a + (1.0 - i as f64) / 2.0)).sum::<f64>()
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const EULER: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn digamma_reference_values() {
        assert_abs_diff_eq!(digamma(1.0), -EULER, epsilon = 1e-13);
        assert_abs_diff_eq!(digamma(0.5), -EULER - 2.0 * 2f64.ln(), epsilon = 1e-13);
        // psi(n) = H_{n-1} - gamma
        let h: f64 = (1..20).map(|k| 1.0 / k as f64).sum();
        assert_abs_diff_eq!(digamma(20.0), h - EULER, epsilon = 1e-13);
        assert_abs_diff_eq!(digamma(1e-3), -1000.0 - EULER + PI * PI / 6.0 * 1e-3, epsilon = 1e-5);
    }

    #[test]
    fn trigamma_reference_values() {
        assert_abs_diff_eq!(trigamma(1.0), PI * PI / 6.0, epsilon = 1e-13);
        assert_abs_diff_eq!(trigamma(0.5), PI * PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(trigamma(2.0), PI * PI / 6.0 - 1.0, epsilon = 1e-13);
    }

    #[test]
    fn trigamma_is_derivative_of_digamma() {
        for &x in &[0.3, 1.7, 4.2, 9.9, 10.1, 35.0] {
            let h = 1e-5;
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(trigamma(x), fd, epsilon = 1e-7 * trigamma(x).max(1.0));
        }
    }

    #[test]
    fn digamma_is_derivative_of_ln_gamma() {
        for &x in &[0.7, 2.5, 11.0, 50.0] {
            let h = 1e-5;
            let fd = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(digamma(x), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn multivariate_gamma_reduces_for_p1() {
        assert_abs_diff_eq!(multi_ln_gamma(3.3, 1), ln_gamma(3.3), epsilon = 1e-14);
        assert_abs_diff_eq!(multi_digamma(3.3, 1), digamma(3.3), epsilon = 1e-14);
        // Gamma_2(a) = sqrt(pi) Gamma(a) Gamma(a - 1/2)
        let a = 2.5;
        let expect = 0.5 * PI.ln() + ln_gamma(a) + ln_gamma(a - 0.5);
        assert_abs_diff_eq!(multi_ln_gamma(a, 2), expect, epsilon = 1e-13);
    }
}
