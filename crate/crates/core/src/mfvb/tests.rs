use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::*;
use crate::models::{GaussianTarget, NormalInverseGamma, NormalNormal};

fn normal_normal() -> ModelSpec {
    let data = vec![0.3, -1.2, 2.5, 0.8, 1.1, -0.4];
    let joint = NormalNormal::new(data, 1.5).unwrap();
    ModelSpec::new(Arc::new(joint), NormalNormal::prior_from_moments(0.5, 4.0)).unwrap()
}

fn log_evidence(data: &[f64], noise: f64, m0: f64, v0: f64) -> f64 {
    let n = data.len();
    let cov = DMatrix::from_fn(n, n, |i, j| v0 + if i == j { noise } else { 0.0 });
    let chol = cov.cholesky().unwrap();
    let r = DVector::from_iterator(n, data.iter().map(|x| x - m0));
    let quad = r.dot(&chol.solve(&r));
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (quad + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln())
}

#[test]
fn normal_normal_recovers_exact_posterior() {
    let model = normal_normal();
    let sol = fit(&model, None, &FitOptions::default()).unwrap();
    assert!(sol.converged);
    let exact = model.exact_posterior().unwrap();
    let (mean, cov) = sol.params.block(0).gaussian_moments().unwrap();
    assert!((mean[0] - exact.mean[0]).abs() < 1e-8);
    assert!((cov[(0, 0)] - exact.cov[(0, 0)]).abs() < 1e-8);
    // mean-field is exact here, so the bound is tight
    let ev = log_evidence(&[0.3, -1.2, 2.5, 0.8, 1.1, -0.4], 1.5, 0.5, 4.0);
    assert!((sol.elbo - ev).abs() < 1e-8, "{} vs {}", sol.elbo, ev);
    assert!(sol.elbo_non_decreasing());
}

#[test]
fn deterministic_and_init_invariant() {
    let model = normal_normal();
    let a = fit(&model, None, &FitOptions::default()).unwrap();
    let b = fit(&model, None, &FitOptions::default()).unwrap();
    assert_eq!(a.mean, b.mean);
    assert_eq!(a.elbo_trace, b.elbo_trace);
    let start = DVector::from_vec(vec![-3.0, 9.0 + 0.5]);
    let c = fit(&model, Some(&start), &FitOptions::default()).unwrap();
    assert!((c.mean.clone() - a.mean.clone()).amax() < 1e-8);
}

#[test]
fn gradient_matches_finite_differences() {
    let model = normal_normal();
    let q = model.initial_params().unwrap();
    let g = elbo_gradient(&model, &q).unwrap();
    let m = q.mean().clone();
    for j in 0..m.len() {
        let h = 1e-5 * m[j].abs().max(1.0);
        let mut p = m.clone();
        p[j] += h;
        let mut n = m.clone();
        n[j] -= h;
        let fd = (elbo(&model, &p).unwrap() - elbo(&model, &n).unwrap()) / (2.0 * h);
        assert!((fd - g[j]).abs() < 1e-5 * (1.0 + g[j].abs()), "{j}: {fd} vs {}", g[j]);
    }
}

#[test]
fn fitted_gradient_vanishes() {
    let data: Vec<f64> = (0..30).map(|i| ((i * 37) % 11) as f64 * 0.4 - 1.5).collect();
    let model = ModelSpec::new(Arc::new(NormalInverseGamma::new(data).unwrap()), vec![0.0, 0.5, 3.0, 2.0]).unwrap();
    let sol = fit(&model, None, &FitOptions::default()).unwrap();
    assert!(sol.converged);
    assert!(sol.grad_norm < 1e-8);
    assert!(sol.elbo_non_decreasing());
    let g = elbo_gradient(&model, &sol.params).unwrap();
    assert!(g.amax() < 1e-6, "{g}");
}

#[test]
fn gaussian_target_gives_conditional_variances() {
    let prec = DMatrix::from_row_slice(3, 3, &[2.0, 0.6, 0.2, 0.6, 1.5, -0.4, 0.2, -0.4, 1.0]);
    let loc = vec![1.0, -2.0, 0.5];
    let model = ModelSpec::new(Arc::new(GaussianTarget::new(prec.clone()).unwrap()), loc.clone()).unwrap();
    let sol = fit(&model, None, &FitOptions::default()).unwrap();
    for i in 0..3 {
        let (mean, cov) = sol.params.block(i).gaussian_moments().unwrap();
        assert!((mean[0] - loc[i]).abs() < 1e-8);
        assert!((cov[(0, 0)] - 1.0 / prec[(i, i)]).abs() < 1e-8);
    }
}

#[test]
fn constant_shift_leaves_optimum() {
    struct Shifted(NormalNormal, f64);
    impl LogJoint for Shifted {
        fn name(&self) -> &str {
            "shifted"
        }
        fn layout(&self) -> &Layout {
            self.0.layout()
        }
        fn hyper_names(&self) -> Vec<String> {
            self.0.hyper_names()
        }
        fn expected_log_lik(&self, q: &VarParams) -> Result<f64> {
            Ok(self.0.expected_log_lik(q)? + self.1)
        }
        fn expected_log_prior(&self, q: &VarParams, alpha: &[f64]) -> Result<f64> {
            self.0.expected_log_prior(q, alpha)
        }
        fn gradient(&self, q: &VarParams, alpha: &[f64]) -> Result<DVector<f64>> {
            self.0.gradient(q, alpha)
        }
        fn initial_params(&self, alpha: &[f64]) -> Result<VarParams> {
            self.0.initial_params(alpha)
        }
        fn fingerprint(&self) -> String {
            format!("shifted{}", self.1)
        }
    }
    let base = normal_normal();
    let joint = NormalNormal::new(vec![0.3, -1.2, 2.5, 0.8, 1.1, -0.4], 1.5).unwrap();
    let shifted = ModelSpec::new(Arc::new(Shifted(joint, 1e3)), base.hyperparams().to_vec()).unwrap();
    let a = fit(&base, None, &FitOptions::default()).unwrap();
    let b = fit(&shifted, None, &FitOptions::default()).unwrap();
    assert!((a.mean.clone() - b.mean.clone()).amax() < 1e-8);
    assert!((b.elbo - a.elbo - 1e3).abs() < 1e-8);
}

#[test]
fn iteration_cap_reports_nonconvergence() {
    let model = normal_normal();
    let r = fit(&model, None, &FitOptions { tol: 1e-8, max_iter: 1 });
    assert!(matches!(r, Err(Error::NonConvergence { .. })), "{r:?}");
}

#[test]
fn unknown_hyperparameter_lists_valid_names() {
    let model = normal_normal();
    match model.with_override("nope", 1.0) {
        Err(Error::UnknownHyperparameter { name, valid }) => {
            assert_eq!(name, "nope");
            assert!(valid.contains("prior_eta1") && valid.contains("prior_eta2"));
        }
        other => panic!("{other:?}"),
    }
}
