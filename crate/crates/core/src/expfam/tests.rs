use super::*;
use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{E, PI};

fn mc_moments(block: &ExpFamBlock, n: usize, seed: u64) -> (DVector<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = block.dim();
    let mut sum = DVector::zeros(d);
    let mut outer = DMatrix::zeros(d, d);
    for _ in 0..n {
        let x = block.sample(&mut rng).unwrap();
        let t = DVector::from_vec(block.family.sufficient_stats(&x).unwrap());
        sum += &t;
        outer += &t * t.transpose();
    }
    let mean = sum / n as f64;
    let cov = outer / n as f64 - &mean * mean.transpose();
    (mean, cov)
}

#[test]
fn standard_normal_moments() {
    let b = ExpFamBlock::gaussian(0.0, 1.0).unwrap();
    assert_abs_diff_eq!(b.mean[0], 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(b.mean[1], 1.0, epsilon = 1e-15);
}

#[test]
fn gaussian_from_natural_example() {
    let m = Family::GaussianUnivariate.mean_from_natural(&[0.5, -0.125]).unwrap();
    assert_abs_diff_eq!(m[0], 2.0, epsilon = 1e-14);
    assert_abs_diff_eq!(m[1], 8.0, epsilon = 1e-14);
    // Monte Carlo cross-check of E[x^2] = mu^2 + sigma^2
    let b = ExpFamBlock::from_natural(Family::GaussianUnivariate, &[0.5, -0.125]).unwrap();
    let (mc, cov) = mc_moments(&b, 1_000_000, 1);
    let se = (cov[(1, 1)] / 1e6).sqrt();
    assert!((mc[1] - 8.0).abs() < 3.0 * se, "{} vs 8 (se {se})", mc[1]);
}

#[test]
fn gaussian_stat_covariances() {
    let c = ExpFamBlock::gaussian(0.0, 1.0).unwrap().suff_stat_covariance().unwrap();
    let expect = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
    assert!((c - expect).abs().max() < 1e-14);
    let c = ExpFamBlock::gaussian(1.0, 1.0).unwrap().suff_stat_covariance().unwrap();
    let expect = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 6.0]);
    assert!((c - expect).abs().max() < 1e-13);
}

#[test]
fn gamma_stat_covariance_and_entropy() {
    let b = ExpFamBlock::gamma(1.0, 1.0).unwrap();
    let c = b.suff_stat_covariance().unwrap();
    let expect = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, PI * PI / 6.0]);
    assert!((c - expect).abs().max() < 1e-13);
    assert_abs_diff_eq!(b.entropy().unwrap(), 1.0, epsilon = 1e-13);
}

#[test]
fn stat_covariances_match_monte_carlo() {
    let blocks = vec![
        ExpFamBlock::gaussian(1.0, 1.0).unwrap(),
        ExpFamBlock::gamma(1.0, 1.0).unwrap(),
        ExpFamBlock::inverse_gamma(6.0, 2.0).unwrap(),
        ExpFamBlock::gaussian_mv(
            &DVector::from_vec(vec![0.5, -1.0]),
            &DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]),
        )
        .unwrap(),
        ExpFamBlock::wishart(7.0, &DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.1])).unwrap(),
    ];
    for (s, b) in blocks.iter().enumerate() {
        let n = 400_000;
        let (mean, cov) = mc_moments(b, n, 10 + s as u64);
        let exact = b.suff_stat_covariance().unwrap();
        for i in 0..b.dim() {
            let se = (exact[(i, i)] / n as f64).sqrt();
            assert!((mean[i] - b.mean[i]).abs() < 4.0 * se, "{:?} mean[{i}]", b.family);
            for j in 0..b.dim() {
                let scale = (exact[(i, i)] * exact[(j, j)]).sqrt();
                assert!(
                    (cov[(i, j)] - exact[(i, j)]).abs() < 0.05 * scale,
                    "{:?} cov[{i},{j}] mc {} exact {}",
                    b.family,
                    cov[(i, j)],
                    exact[(i, j)]
                );
            }
        }
    }
}

#[test]
fn entropy_closed_forms() {
    let h0 = 0.5 * (2.0 * PI * E).ln();
    assert_abs_diff_eq!(ExpFamBlock::gaussian(0.0, 1.0).unwrap().entropy().unwrap(), h0, epsilon = 1e-13);
    assert_abs_diff_eq!(h0, 1.4189385332046727, epsilon = 1e-15);
    assert_abs_diff_eq!(
        ExpFamBlock::gaussian(0.0, 4.0).unwrap().entropy().unwrap(),
        h0 + 2f64.ln(),
        epsilon = 1e-13
    );
    // inverse gamma: a + log(b Gamma(a)) - (1 + a) psi(a)
    let (a, b) = (3.0f64, 2.0f64);
    let expect = a + b.ln() + crate::special::ln_gamma(a) - (1.0 + a) * crate::special::digamma(a);
    assert_abs_diff_eq!(ExpFamBlock::inverse_gamma(a, b).unwrap().entropy().unwrap(), expect, epsilon = 1e-13);
    // multivariate gaussian: 0.5 log |2 pi e Sigma|
    let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let b = ExpFamBlock::gaussian_mv(&DVector::from_vec(vec![3.0, -1.0]), &cov).unwrap();
    let expect = 0.5 * ((2.0 * PI * E).powi(2) * cov.determinant()).ln();
    assert_abs_diff_eq!(b.entropy().unwrap(), expect, epsilon = 1e-12);
}

#[test]
fn wishart_entropy_matches_monte_carlo() {
    let b = ExpFamBlock::wishart(6.0, &DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 200_000;
    let draws: Vec<f64> = (0..n).map(|_| -b.log_density(&b.sample(&mut rng).unwrap()).unwrap()).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - b.entropy().unwrap()).abs() < 3.0 * se);
}

#[test]
fn wishart_example_values() {
    let v = DMatrix::<f64>::identity(2, 2) / 5.0;
    let b = ExpFamBlock::wishart(5.0, &v).unwrap();
    assert_abs_diff_eq!(b.mean[0], 1.0, epsilon = 1e-14);
    assert_abs_diff_eq!(b.mean[1], 0.0, epsilon = 1e-14);
    assert_abs_diff_eq!(b.mean[2], 1.0, epsilon = 1e-14);
    let ex = wishart_expectations(5.0, &v).unwrap();
    assert!((ex.mean_precision.clone() - DMatrix::identity(2, 2)).abs().max() < 1e-14);
    let d = crate::special::digamma;
    let expect = d(2.5) + d(2.0) + (1.0f64 / 25.0).ln() + 2.0 * 2f64.ln();
    assert_abs_diff_eq!(ex.logdet, expect, epsilon = 1e-13);
    assert_abs_diff_eq!(b.mean[3], expect, epsilon = 1e-13);
}

#[test]
fn wishart_domain_errors() {
    let v = DMatrix::<f64>::identity(2, 2);
    assert!(matches!(wishart_expectations(3.0, &v), Err(Error::Domain(_))));
    let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(matches!(wishart_expectations(5.0, &bad), Err(Error::Domain(_))));
    assert!(ExpFamBlock::wishart(2.5, &v).is_err());
}

#[test]
fn invgamma_sqrt_values() {
    assert_abs_diff_eq!(invgamma_sqrt_expectation(1.5, 1.0).unwrap(), 2.0 / PI.sqrt(), epsilon = 1e-14);
    assert_abs_diff_eq!(invgamma_sqrt_expectation(1.5, 1.0).unwrap(), 1.1283791670955126, epsilon = 1e-14);
    assert_abs_diff_eq!(invgamma_sqrt_expectation(1.5, 4.0).unwrap(), 4.0 / PI.sqrt(), epsilon = 1e-14);
    assert!(matches!(invgamma_sqrt_expectation(0.5, 1.0), Err(Error::Domain(_))));
}

#[test]
fn natural_domain_rejections() {
    assert!(Family::GaussianUnivariate.mean_from_natural(&[0.0, 0.1]).is_err());
    assert!(Family::InverseGamma.mean_from_natural(&[1.0, -2.0]).is_err());
    assert!(Family::Gamma.mean_from_natural(&[-1.0, -1.5]).is_err());
    assert!(Family::GaussianUnivariate.natural_from_mean(&[1.0, 0.5]).is_err());
    assert!(matches!(
        Family::Gamma.mean_from_natural(&[1.0]),
        Err(Error::DimensionMismatch { expected: 2, got: 1 })
    ));
}

/// Central differences of the mean map in natural coordinates.
fn fd_jacobian(family: Family, eta: &[f64]) -> DMatrix<f64> {
    let n = eta.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = 1e-5 * eta[j].abs().max(1e-2);
        let mut up = eta.to_vec();
        let mut dn = eta.to_vec();
        up[j] += h;
        dn[j] -= h;
        let mu = family.mean_from_natural(&up).unwrap();
        let md = family.mean_from_natural(&dn).unwrap();
        for i in 0..n {
            jac[(i, j)] = (mu[i] - md[i]) / (2.0 * h);
        }
    }
    jac
}

fn random_block(kind: u8, x: &[f64]) -> ExpFamBlock {
    match kind {
        0 => ExpFamBlock::gaussian(x[0] * 3.0, 0.1 + x[1].abs() * 2.0).unwrap(),
        1 => ExpFamBlock::gamma(0.5 + x[0].abs() * 5.0, 0.2 + x[1].abs() * 3.0).unwrap(),
        2 => ExpFamBlock::inverse_gamma(0.5 + x[0].abs() * 5.0, 0.2 + x[1].abs() * 3.0).unwrap(),
        3 => {
            let a = DMatrix::from_row_slice(2, 2, &[1.0 + x[0].abs(), 0.0, x[1], 0.5 + x[2].abs()]);
            let cov = &a * a.transpose();
            ExpFamBlock::gaussian_mv(&DVector::from_vec(vec![x[2] * 2.0, -x[0]]), &cov).unwrap()
        }
        _ => {
            let a = DMatrix::from_row_slice(2, 2, &[0.3 + x[0].abs(), 0.0, x[1] * 0.5, 0.2 + x[2].abs()]);
            ExpFamBlock::wishart(3.2 + x[1].abs() * 10.0, &(&a * a.transpose())).unwrap()
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn natural_mean_round_trip(kind in 0u8..5, x in prop::collection::vec(-1.0f64..1.0, 3)) {
        let b = random_block(kind, &x);
        let eta = b.family.natural_from_mean(b.mean.as_slice()).unwrap();
        for (a, e) in eta.iter().zip(b.natural.iter()) {
            prop_assert!((a - e).abs() <= 1e-10 * e.abs().max(1.0), "{:?}: {a} vs {e}", b.family);
        }
    }

    #[test]
    fn covariance_is_hessian_of_log_partition(kind in 0u8..5, x in prop::collection::vec(-1.0f64..1.0, 3)) {
        let b = random_block(kind, &x);
        let cov = b.suff_stat_covariance().unwrap();
        let fd = fd_jacobian(b.family, b.natural.as_slice());
        let scale = crate::linalg::max_abs(&cov);
        prop_assert!((&cov - &fd).abs().max() <= 1e-6 * scale, "{:?}\n{cov}\n{fd}", b.family);
        prop_assert!((&cov - cov.transpose()).abs().max() <= 1e-12 * scale);
        let eig = cov.clone().symmetric_eigen().eigenvalues;
        prop_assert!(eig.min() >= -1e-10 * scale);
    }

    #[test]
    fn unconstrained_round_trip_and_jacobian(kind in 0u8..5, x in prop::collection::vec(-1.0f64..1.0, 3)) {
        let b = random_block(kind, &x);
        let u = b.unconstrained().unwrap();
        let (eta, jac) = b.family.natural_from_unconstrained(&u);
        for (a, e) in eta.iter().zip(b.natural.iter()) {
            prop_assert!((a - e).abs() <= 1e-10 * e.abs().max(1.0));
        }
        for j in 0..u.len() {
            let h = 1e-6;
            let mut up = u.clone();
            let mut dn = u.clone();
            up[j] += h;
            dn[j] -= h;
            let (eu, _) = b.family.natural_from_unconstrained(&up);
            let (ed, _) = b.family.natural_from_unconstrained(&dn);
            for i in 0..eta.len() {
                let fd = (eu[i] - ed[i]) / (2.0 * h);
                prop_assert!((fd - jac[(i, j)]).abs() <= 1e-6 * jac[(i, j)].abs().max(1.0));
            }
        }
    }
}

#[test]
fn wishart_sigma_moment_gradients_match_finite_differences() {
    let b = ExpFamBlock::wishart(6.5, &DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3])).unwrap();
    let eta = b.natural.as_slice().to_vec();
    let grads = wishart::sigma_diag_moment_gradients(&eta, 2).unwrap();
    let moments = |e: &[f64]| {
        let p = wishart::decode(e, 2).unwrap();
        let ex = wishart_expectations(p.dof, &p.scale).unwrap();
        (ex.log_sigma_diag, ex.inv_sigma_diag)
    };
    for j in 0..eta.len() {
        let h = 1e-6;
        let mut up = eta.clone();
        let mut dn = eta.clone();
        up[j] += h;
        dn[j] -= h;
        let (lu, iu) = moments(&up);
        let (ld, id) = moments(&dn);
        for k in 0..2 {
            assert_abs_diff_eq!(grads[k].0[j], (lu[k] - ld[k]) / (2.0 * h), epsilon = 1e-6);
            assert_abs_diff_eq!(grads[k].1[j], (iu[k] - id[k]) / (2.0 * h), epsilon = 1e-5);
        }
    }
}
