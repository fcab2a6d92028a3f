//! Predicted-versus-actual check of hyperparameter sensitivities.
//!
//! Predictions come from the linear response system at the base fit. The
//! actual shifts come from re-solving the problem at perturbed
//! hyperparameters with an independent engine. Deterministic engines use
//! central differences at `h` and `h / 2` combined by Richardson
//! extrapolation. The sampler uses a forward difference between two chains
//! driven by the same random numbers, and its standard errors come from the
//! paired per-draw differences.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::mcmc::{mean_se_ess, metropolis_sample, McmcConfig};
use super::quadrature::{integrate_2d, integrate_vec, Domain, QuadOptions};
use super::PosteriorTarget;
use crate::error::{Error, Result};
use crate::lrvb::build_system;
use crate::mfvb::{fit, FitOptions, ModelSpec, VbSolution};
use crate::robustness::hyperparam_sensitivity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Quadrature,
    Mcmc,
    Vb,
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadrature" => Ok(Engine::Quadrature),
            "mcmc" => Ok(Engine::Mcmc),
            "vb" => Ok(Engine::Vb),
            _ => Err(Error::InvalidInput(format!("unknown engine `{s}`; valid: quadrature, mcmc, vb"))),
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Quadrature => "quadrature",
            Engine::Mcmc => "mcmc",
            Engine::Vb => "vb",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RerunOptions {
    /// Step along the direction. `None` picks 1% of the largest perturbed
    /// hyperparameter for deterministic engines, and a step predicted to
    /// move the most sensitive quantity by `mcmc_shift_sd` posterior
    /// standard deviations for the sampler.
    pub step: Option<f64>,
    pub fit: FitOptions,
    pub quad: QuadOptions,
    /// Retained draws per chain.
    pub draws: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub mcmc_shift_sd: f64,
}

impl Default for RerunOptions {
    fn default() -> Self {
        Self {
            step: None,
            fit: FitOptions { tol: 1e-10, max_iter: 10_000 },
            quad: QuadOptions { abs_tol: 1e-13, rel_tol: 1e-12, ..QuadOptions::default() },
            draws: 100_000,
            burn_in: 5_000,
            seed: 0,
            mcmc_shift_sd: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonResult {
    pub engine: Engine,
    pub direction: Vec<f64>,
    pub step: f64,
    pub quantities: Vec<String>,
    /// Linear response derivative along the direction.
    pub predicted_deltas: Vec<f64>,
    /// Finite-difference derivative from reruns.
    pub actual_deltas: Vec<f64>,
    /// Monte Carlo standard errors for the sampler; for deterministic
    /// engines the Richardson error estimate, floored at roundoff.
    pub mc_standard_errors: Vec<f64>,
    /// Least-squares slope of actual on predicted through the origin.
    pub slope: f64,
    /// Pearson correlation; absent with fewer than two quantities or no spread.
    pub correlation: Option<f64>,
}

pub fn slope_through_origin(predicted: &[f64], actual: &[f64]) -> f64 {
    let num: f64 = predicted.iter().zip(actual).map(|(p, a)| p * a).sum();
    let den: f64 = predicted.iter().map(|p| p * p).sum();
    num / den
}

pub fn correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if !(sxx > 0.0 && syy > 0.0) {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn default_deterministic_step(model: &ModelSpec, dalpha: &[f64]) -> f64 {
    let dmax = dalpha.iter().fold(0.0f64, |a, d| a.max(d.abs()));
    let amax = model
        .hyperparams()
        .iter()
        .zip(dalpha)
        .filter(|(_, d)| **d != 0.0)
        .fold(0.0f64, |a, (x, _)| a.max(x.abs()));
    let base = if amax > 0.0 { 0.01 * amax } else { 0.01 };
    base / dmax
}

/// Posterior means of the target's quantities at `alpha` by quadrature in
/// its (at most two) unconstrained coordinates.
fn quadrature_means(target: &dyn PosteriorTarget, alpha: &[f64], center: &[f64], scale: &[f64], opts: &QuadOptions) -> Result<Vec<f64>> {
    let d = target.dim();
    let nq = target.quantity_values(center).len();
    let ref_lp = target.log_density(center, alpha);
    if !ref_lp.is_finite() {
        return Err(Error::InvalidInput("posterior density is not finite at the quadrature center".into()));
    }
    let fill = |x: &[f64], out: &mut [f64]| {
        let w = (target.log_density(x, alpha) - ref_lp).exp();
        out[0] = w;
        if w > 0.0 {
            for (o, v) in out[1..].iter_mut().zip(target.quantity_values(x)) {
                *o = w * v;
            }
        } else {
            out[1..].iter_mut().for_each(|o| *o = 0.0);
        }
    };
    let domain = |j: usize| Domain::Real { center: center[j], scale: scale[j] };
    let r = match d {
        1 => integrate_vec(|x, out: &mut [f64]| fill(&[x], out), nq + 1, domain(0), opts)?,
        2 => integrate_2d(|x, y, out: &mut [f64]| fill(&[x, y], out), nq + 1, domain(0), domain(1), opts)?,
        _ => return Err(Error::InvalidInput(format!("quadrature engine handles at most 2 dimensions, target has {d}"))),
    };
    Ok(r.value[1..].iter().map(|v| v / r.value[0]).collect())
}

/// Central differences at `h` and `h / 2`, Richardson-combined.
fn richardson<F>(h: f64, f: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(f64) -> Result<Vec<f64>> + Sync,
{
    let ts = [h, -h, 0.5 * h, -0.5 * h];
    let vals: Vec<Result<Vec<f64>>> = {
        use rayon::prelude::*;
        ts.par_iter().map(|&t| f(t)).collect()
    };
    let mut v = Vec::with_capacity(4);
    for r in vals {
        v.push(r?);
    }
    let n = v[0].len();
    let mut est = Vec::with_capacity(n);
    let mut err = Vec::with_capacity(n);
    for j in 0..n {
        let d1 = (v[0][j] - v[1][j]) / (2.0 * h);
        let d2 = (v[2][j] - v[3][j]) / h;
        let e = (4.0 * d2 - d1) / 3.0;
        est.push(e);
        err.push(((d2 - d1) / 3.0).abs().max(f64::EPSILON * e.abs().max(f64::MIN_POSITIVE)));
    }
    Ok((est, err))
}

fn base_fit(model: &ModelSpec, opts: &RerunOptions) -> Result<VbSolution> {
    fit(model, None, &opts.fit)
}

/// Compares linear response predictions along `dalpha` with reruns of the
/// chosen engine, over the model's tracked quantities.
pub fn perturb_and_rerun(model: &ModelSpec, dalpha: &[f64], engine: Engine, opts: &RerunOptions) -> Result<ComparisonResult> {
    if dalpha.len() != model.hyperparams().len() {
        return Err(Error::DimensionMismatch { expected: model.hyperparams().len(), got: dalpha.len() });
    }
    if dalpha.iter().all(|d| *d == 0.0) {
        return Err(Error::InvalidInput("perturbation direction is zero".into()));
    }
    let sol = base_fit(model, opts)?;
    let sys = build_system(model, &sol)?;
    let quantities = model.quantities();
    let sens = hyperparam_sensitivity(model, &sol, &sys, dalpha)?;
    let predicted: Vec<f64> = quantities.iter().map(|q| sens[q.index]).collect();
    let names: Vec<String> = quantities.iter().map(|q| q.name.clone()).collect();

    let (step, actual, ses) = match engine {
        Engine::Vb => {
            let h = opts.step.unwrap_or_else(|| default_deterministic_step(model, dalpha));
            let (est, err) = richardson(h, |t| {
                let m = model.shifted(dalpha, t)?;
                let s = fit(&m, Some(&sol.mean), &opts.fit)?;
                Ok(quantities.iter().map(|q| s.mean[q.index]).collect())
            })?;
            (h, est, err)
        }
        Engine::Quadrature => {
            let target = model
                .posterior_target()
                .ok_or_else(|| Error::InvalidInput(format!("model {} has no posterior target", model.name())))?;
            let (center, scale) = target.locate(&sol.params);
            let h = opts.step.unwrap_or_else(|| default_deterministic_step(model, dalpha));
            let (est, err) = richardson(h, |t| {
                let m = model.shifted(dalpha, t)?;
                quadrature_means(target, m.hyperparams(), &center, &scale, &opts.quad)
            })?;
            (h, est, err)
        }
        Engine::Mcmc => {
            let target = model
                .posterior_target()
                .ok_or_else(|| Error::InvalidInput(format!("model {} has no posterior target", model.name())))?;
            let h = match opts.step {
                Some(h) => h,
                None => mcmc_step(model, &sys, &predicted, &quantities, dalpha, opts.mcmc_shift_sd)?,
            };
            let perturbed = model.shifted(dalpha, h)?;
            let (center, scale) = target.locate(&sol.params);
            let config = McmcConfig {
                chain_length: opts.draws + opts.burn_in,
                burn_in: opts.burn_in,
                step_scales: scale.iter().map(|s| 2.4 * s).collect(),
                seed: opts.seed,
            };
            let (a0, a1) = (model.hyperparams().to_vec(), perturbed.hyperparams().to_vec());
            let (r0, r1) = rayon::join(
                || metropolis_sample(|x| target.log_density(x, &a0), &center, &config),
                || metropolis_sample(|x| target.log_density(x, &a1), &center, &config),
            );
            let (r0, r1) = (r0?, r1?);
            let nq = quantities.len();
            let mut diffs = vec![Vec::with_capacity(r0.len()); nq];
            for i in 0..r0.len() {
                let (v0, v1) = (target.quantity_values(r0.draw(i)), target.quantity_values(r1.draw(i)));
                for j in 0..nq {
                    diffs[j].push((v1[j] - v0[j]) / h);
                }
            }
            let mut est = Vec::with_capacity(nq);
            let mut se = Vec::with_capacity(nq);
            for d in &diffs {
                let (m, s, _) = mean_se_ess(d);
                est.push(m);
                se.push(s);
            }
            (h, est, se)
        }
    };
    if actual.len() != predicted.len() {
        return Err(Error::DimensionMismatch { expected: predicted.len(), got: actual.len() });
    }
    Ok(ComparisonResult {
        engine,
        direction: dalpha.to_vec(),
        step,
        quantities: names,
        slope: slope_through_origin(&predicted, &actual),
        correlation: correlation(&predicted, &actual),
        predicted_deltas: predicted,
        actual_deltas: actual,
        mc_standard_errors: ses,
    })
}

/// Step predicted to shift the most sensitive quantity by `shift_sd`
/// linear response standard deviations, halved until the perturbed
/// hyperparameters are valid.
fn mcmc_step(
    model: &ModelSpec,
    sys: &crate::lrvb::LrvbSystem,
    predicted: &[f64],
    quantities: &[crate::mfvb::Quantity],
    dalpha: &[f64],
    shift_sd: f64,
) -> Result<f64> {
    let mut rate = 0.0f64;
    for (p, q) in predicted.iter().zip(quantities) {
        let sd = sys.variance(&q.gradient(model.dim()))?.max(0.0).sqrt();
        if sd > 0.0 {
            rate = rate.max(p.abs() / sd);
        }
    }
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::InvalidInput("no tracked quantity responds to this direction".into()));
    }
    let mut h = shift_sd / rate;
    for _ in 0..60 {
        if model.shifted(dalpha, h).is_ok() {
            return Ok(h);
        }
        h *= 0.5;
    }
    Err(Error::NonDifferentiablePrior("no valid step along the direction".into()))
}
