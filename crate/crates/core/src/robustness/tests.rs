use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::*;
use crate::lrvb::build_system;
use crate::mfvb::{fit, FitOptions};
use crate::models::{GaussianTarget, NormalInverseGamma, NormalNormal};
use crate::oracle::quadrature::integrate;

const DATA: [f64; 5] = [1.3, 0.2, 2.1, 1.7, 0.9];
const NOISE: f64 = 2.0;
const PRIOR: (f64, f64) = (0.0, 1.5);

fn setup() -> (ModelSpec, VbSolution, LrvbSystem) {
    let joint = NormalNormal::new(DATA.to_vec(), NOISE).unwrap();
    let model = ModelSpec::new(Arc::new(joint), NormalNormal::prior_from_moments(PRIOR.0, PRIOR.1)).unwrap();
    let sol = fit(&model, None, &FitOptions::default()).unwrap();
    let sys = build_system(&model, &sol).unwrap();
    (model, sol, sys)
}

fn normal_logpdf(x: f64, m: f64, v: f64) -> f64 {
    -0.5 * (x - m).powi(2) / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln()
}

/// Exact posterior mean under the prior `(1 - eps) N(PRIOR) + eps N(cm, cs^2)`.
fn contaminated_mean(eps: f64, cm: f64, cs: f64) -> f64 {
    let lik = |t: f64| DATA.iter().map(|x| normal_logpdf(*x, t, NOISE)).sum::<f64>();
    let prior = |t: f64| {
        (1.0 - eps) * normal_logpdf(t, PRIOR.0, PRIOR.1).exp() + eps * normal_logpdf(t, cm, cs * cs).exp()
    };
    let opts = QuadOptions { abs_tol: 1e-14, rel_tol: 1e-13, ..QuadOptions::default() };
    let d = Domain::Real { center: 1.0, scale: 1.0 };
    let z = integrate(|t| (lik(t)).exp() * prior(t), d, &opts).unwrap().scalar();
    let m1 = integrate(|t| t * (lik(t)).exp() * prior(t), d, &opts).unwrap().scalar();
    m1 / z
}

#[test]
fn hyper_sensitivity_matches_closed_form() {
    let (model, sol, sys) = setup();
    let n = DATA.len() as f64;
    let prec = 1.0 / PRIOR.1 + n / NOISE;
    let s = hyperparam_sensitivity(&model, &sol, &sys, &[1.0, 0.0]).unwrap();
    assert!((s[0] - 1.0 / prec).abs() < 1e-12);
    // the cross gradient is the unit vector, so the result is a column of sigma_hat
    assert_eq!(s[0], sys.sigma_hat[(0, 0)]);
    // d mean / d eta2 = 2 * mean / prec
    let mean = sol.mean[0];
    let s2 = hyperparam_sensitivity(&model, &sol, &sys, &[0.0, 1.0]).unwrap();
    assert!((s2[0] - 2.0 * mean / prec).abs() < 1e-10, "{} vs {}", s2[0], 2.0 * mean / prec);
}

#[test]
fn density_contamination_matches_exact_posterior() {
    let (model, sol, sys) = setup();
    let (cm, cs) = (2.5, 0.7);
    let c = GaussianMixture::single(vec![cm], vec![cs]).unwrap();
    let spec = ContaminationSpec { block: 0, contaminant: Contaminant::Density(Arc::new(c)) };
    let g = DVector::from_vec(vec![1.0, 0.0]);
    let v = contamination_sensitivity(&model, &sol, &sys, &spec, &g).unwrap();
    let h = 1e-4;
    let fd = (contaminated_mean(h, cm, cs) - contaminated_mean(-h, cm, cs)) / (2.0 * h);
    assert!((v - fd).abs() < 1e-6 * fd.abs().max(1e-3), "{v} vs {fd}");
    let full = contamination_response(&model, &sol, &sys, &spec).unwrap();
    assert!((full[0] - v).abs() < 1e-12);
}

#[test]
fn grid_matches_dirac_contamination_bit_exactly() {
    let (model, sol, sys) = setup();
    let g = DVector::from_vec(vec![1.0, 0.3]);
    let points: Vec<Vec<f64>> = (0..25).map(|i| vec![-3.0 + 0.25 * i as f64]).collect();
    let grid = influence_grid(&model, &sol, &sys, 0, &points, &g).unwrap();
    for (p, v) in points.iter().zip(&grid) {
        let spec = ContaminationSpec { block: 0, contaminant: Contaminant::Dirac(p.clone()) };
        let s = contamination_sensitivity(&model, &sol, &sys, &spec, &g).unwrap();
        assert_eq!(s.to_bits(), v.to_bits());
        let f = influence_function(&model, &sol, &sys, 0, p).unwrap();
        assert!((g.dot(&f) - s).abs() < 1e-12 * (1.0 + s.abs()));
    }
}

#[test]
fn influence_at_posterior_mean_leaves_mean_unchanged() {
    let (model, sol, sys) = setup();
    let f = influence_function(&model, &sol, &sys, 0, &[sol.mean[0]]).unwrap();
    assert_eq!(f[0], 0.0);
    // the second moment still responds, by minus the posterior variance times q/p
    assert!(f[1] < 0.0);
}

#[test]
fn influence_is_a_point_mass_limit() {
    let (model, sol, sys) = setup();
    let g = DVector::from_vec(vec![1.0, 0.0]);
    let x0 = 0.4;
    let spec = ContaminationSpec { block: 0, contaminant: Contaminant::Dirac(vec![x0]) };
    let dirac = contamination_sensitivity(&model, &sol, &sys, &spec, &g).unwrap();
    let narrow = GaussianMixture::single(vec![x0], vec![1e-3]).unwrap();
    let spec = ContaminationSpec { block: 0, contaminant: Contaminant::Density(Arc::new(narrow)) };
    let smooth = contamination_sensitivity(&model, &sol, &sys, &spec, &g).unwrap();
    assert!((dirac - smooth).abs() < 1e-4 * dirac.abs(), "{dirac} vs {smooth}");
}

#[test]
fn far_point_has_zero_prior_density() {
    let (model, sol, sys) = setup();
    let r = influence_function(&model, &sol, &sys, 0, &[1e3]);
    assert!(matches!(r, Err(Error::ZeroPriorDensity { .. })), "{r:?}");
}

#[test]
fn unnormalized_contaminant_is_rejected() {
    #[derive(Debug)]
    struct Half;
    impl ContaminantDensity for Half {
        fn point_dim(&self) -> usize {
            1
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            normal_logpdf(x[0], 0.0, 1.0) + 0.5f64.ln()
        }
        fn sample(&self, _rng: &mut dyn RngCore) -> Vec<f64> {
            vec![0.0]
        }
    }
    let (model, sol, sys) = setup();
    let spec = ContaminationSpec { block: 0, contaminant: Contaminant::Density(Arc::new(Half)) };
    let r = contamination_sensitivity(&model, &sol, &sys, &spec, &DVector::from_vec(vec![1.0, 0.0]));
    assert!(matches!(r, Err(Error::InvalidInput(_))), "{r:?}");
}

/// `p * phi / mass`, a normalized version of the extremal perturbation.
#[derive(Debug)]
struct Normalized(WorstCase, f64);

impl ContaminantDensity for Normalized {
    fn point_dim(&self) -> usize {
        1
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        (self.0.worst_density(x).unwrap() / self.1).ln()
    }
    fn sample(&self, _rng: &mut dyn RngCore) -> Vec<f64> {
        unimplemented!()
    }
}

#[test]
fn worst_case_attains_its_bound() {
    let (model, sol, sys) = setup();
    let g = DVector::from_vec(vec![1.0, 0.0]);
    for p in [1.5, 2.0, 4.0] {
        let wc = worst_case_perturbation(&model, &sol, &sys, 0, &g, p).unwrap();
        let opts = QuadOptions { abs_tol: 1e-12, rel_tol: 1e-11, ..QuadOptions::default() };
        let d = Domain::Real { center: 1.0, scale: 1.0 };
        let mass = integrate(|x| wc.worst_density(&[x]).unwrap(), d, &opts).unwrap().scalar();
        let norm = integrate(
            |x| {
                let lp = normal_logpdf(x, PRIOR.0, PRIOR.1);
                wc.phi(&[x]).unwrap().powf(p) * lp.exp()
            },
            d,
            &opts,
        )
        .unwrap()
        .scalar();
        assert!((norm - 1.0).abs() < 1e-6, "p = {p}: norm {norm}");
        let spec = ContaminationSpec { block: 0, contaminant: Contaminant::Density(Arc::new(Normalized(wc.clone(), mass))) };
        let along = contamination_sensitivity(&model, &sol, &sys, &spec, &g).unwrap() * mass;
        assert!((along - wc.sign * wc.attained_derivative).abs() < 1e-5 * wc.attained_derivative, "p = {p}: {along} vs {}", wc.attained_derivative);
    }
}

#[test]
fn worst_case_bounds_random_perturbations() {
    use rand::SeedableRng;
    let (model, sol, sys) = setup();
    let g = DVector::from_vec(vec![1.0, 0.0]);
    let p = 2.0;
    let wc = worst_case_perturbation(&model, &sol, &sys, 0, &g, p).unwrap();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
    for _ in 0..20 {
        let k = rng.random_range(1..4);
        let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
        let m: Vec<Vec<f64>> = (0..k).map(|_| vec![rng.random_range(-3.0..4.0)]).collect();
        let s: Vec<Vec<f64>> = (0..k).map(|_| vec![rng.random_range(0.3..1.1)]).collect();
        let c = GaussianMixture::new(w, m, s).unwrap();
        let norm = perturbation_norm(&model, &sol, 0, &c, p).unwrap();
        let spec = ContaminationSpec { block: 0, contaminant: Contaminant::Density(Arc::new(c)) };
        let d = contamination_sensitivity(&model, &sol, &sys, &spec, &g).unwrap() / norm;
        assert!(d.abs() <= wc.attained_derivative + 1e-6, "{d} vs {}", wc.attained_derivative);
    }
}

#[test]
fn unrelated_block_cannot_be_normalized() {
    let prec = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
    let model = ModelSpec::new(Arc::new(GaussianTarget::new(prec).unwrap()), vec![0.0, 1.0]).unwrap();
    let sol = fit(&model, None, &FitOptions::default()).unwrap();
    let sys = build_system(&model, &sol).unwrap();
    let g = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
    let r = worst_case_perturbation(&model, &sol, &sys, 1, &g, 2.0);
    assert!(matches!(r, Err(Error::NormalizationFailure(_))), "{r:?}");
}

#[test]
fn report_records_per_entry_failures() {
    let data: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin() * 2.0 + 1.0).collect();
    let model = ModelSpec::new(Arc::new(NormalInverseGamma::new(data).unwrap()), vec![0.0, 1.0, 3.0, 2.0]).unwrap();
    let sol = fit(&model, None, &FitOptions::default()).unwrap();
    let sys = build_system(&model, &sol).unwrap();
    assert!(make_report(&model, &sol, &sys, &[]).entries.is_empty());
    let mu = model.quantities()[0].clone();
    let good = SensitivityQuery::hyperparameter(&model, &mu, "mu0").unwrap();
    let bad = SensitivityQuery {
        quantity: mu.name.clone(),
        grad_h: mu.gradient(model.dim()),
        direction: Direction::Contamination {
            label: "dirac".into(),
            spec: ContaminationSpec { block: 0, contaminant: Contaminant::Dirac(vec![0.0]) },
        },
    };
    let r = make_report(&model, &sol, &sys, &[good, bad]);
    assert_eq!(r.entries.len(), 2);
    let e = &r.entries[0];
    assert!(e.error.is_none());
    assert!((e.normalized.unwrap() - e.value.unwrap() / e.posterior_sd.unwrap()).abs() < 1e-15);
    assert!(r.entries[1].error.as_deref().unwrap().starts_with("NotFactorized"));
    assert_eq!(r.metadata.model_hash.len(), 64);
}

#[test]
fn mixture_sampling_matches_its_moments() {
    use rand::SeedableRng;
    let c = GaussianMixture::new(vec![1.0, 3.0], vec![vec![-2.0], vec![2.0]], vec![vec![0.5], vec![1.0]]).unwrap();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
    let n = 40_000;
    let mean = (0..n).map(|_| c.sample(&mut rng)[0]).sum::<f64>() / n as f64;
    // 0.25 * -2 + 0.75 * 2
    assert!((mean - 1.0).abs() < 0.03, "{mean}");
    let total = integrate(|x| c.log_density(&[x]).exp(), Domain::Real { center: 0.0, scale: 2.0 }, &QuadOptions::default())
        .unwrap()
        .scalar();
    assert!((total - 1.0).abs() < 1e-9);
}
