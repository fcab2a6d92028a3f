//! Local sensitivity of variational posterior means to the prior.
//!
//! Every measure is a contraction of `(I - V H)^{-1}` against a right-hand
//! side supported on one block. Contamination right-hand sides use the full
//! sufficient statistic of the perturbed block, so they are the exact
//! derivative of the mean-field fixed point along the path
//! `(1 - eps) p + eps p_c`.

mod report;

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expfam::{ExpFamBlock, Family};
use crate::lrvb::LrvbSystem;
use crate::mfvb::{ModelSpec, VbSolution};
use crate::oracle::quadrature::{integrate_2d, integrate_vec, Domain, QuadOptions, QuadResult};

pub use report::{
    make_report, model_hash, solution_hash, Direction, ReportEntry, ReportMetadata, SensitivityQuery, SensitivityReport,
};

/// Prior densities below this are treated as zero at a contamination point.
pub const MIN_PRIOR_DENSITY: f64 = 1e-300;

/// Required accuracy of contamination integrals.
pub fn contamination_quad_options() -> QuadOptions {
    QuadOptions { abs_tol: 1e-8, rel_tol: 1e-6, ..QuadOptions::default() }
}

/// `d E_q[theta] / dt` for `alpha(t) = alpha + t * dalpha`, as the full
/// vector over mean parameters.
pub fn hyperparam_sensitivity(
    model: &ModelSpec,
    sol: &VbSolution,
    sys: &LrvbSystem,
    dalpha: &[f64],
) -> Result<DVector<f64>> {
    let gf = model.hyper_cross_gradient(&sol.params, dalpha).map_err(|e| match e {
        Error::Domain(msg) => Error::NonDifferentiablePrior(msg),
        other => other,
    })?;
    sys.apply(&gf)
}

/// Normalized density used to contaminate one block of the prior.
pub trait ContaminantDensity: Send + Sync + fmt::Debug {
    fn point_dim(&self) -> usize;

    fn log_density(&self, point: &[f64]) -> f64;

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64>;
}

/// Finite mixture of axis-aligned Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    sds: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, sds: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || sds.len() != k {
            return Err(Error::InvalidInput("mixture needs matching non-empty weights, means and sds".into()));
        }
        let d = means[0].len();
        if d == 0 || means.iter().chain(&sds).any(|v| v.len() != d) {
            return Err(Error::InvalidInput("mixture components differ in dimension".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || sds.iter().flatten().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidInput("mixture weights must be non-negative and sds positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidInput("mixture weights sum to zero".into()));
        }
        Ok(Self { weights: weights.iter().map(|w| w / total).collect(), means, sds })
    }

    pub fn single(mean: Vec<f64>, sd: Vec<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![sd])
    }
}

impl ContaminantDensity for GaussianMixture {
    fn point_dim(&self) -> usize {
        self.means[0].len()
    }

    fn log_density(&self, point: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.weights.len())
            .map(|c| {
                let lp: f64 = point
                    .iter()
                    .zip(&self.means[c])
                    .zip(&self.sds[c])
                    .map(|((x, m), s)| {
                        let z = (x - m) / s;
                        -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                    })
                    .sum();
                self.weights[c].ln() + lp
            })
            .collect();
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return top;
        }
        top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut c = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                c = i;
                break;
            }
        }
        self.means[c]
            .iter()
            .zip(&self.sds[c])
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum Contaminant {
    /// Point mass at a support point of the block.
    Dirac(Vec<f64>),
    /// Finite mixture of point masses as `(weight, point)`; weights are
    /// nonnegative and sum to one.
    PointMasses(Vec<(f64, Vec<f64>)>),
    Density(Arc<dyn ContaminantDensity>),
}

fn check_weights(atoms: &[(f64, Vec<f64>)]) -> Result<()> {
    if atoms.is_empty() || atoms.iter().any(|(w, _)| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidInput("point-mass weights must be nonnegative and finite".into()));
    }
    let total: f64 = atoms.iter().map(|(w, _)| w).sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!("point-mass weights sum to {total}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ContaminationSpec {
    pub block: usize,
    pub contaminant: Contaminant,
}

fn block_parts<'a>(model: &ModelSpec, sol: &'a VbSolution, block: usize) -> Result<(std::ops::Range<usize>, &'a ExpFamBlock)> {
    let spec = model.layout().block(block)?;
    if sol.params.blocks().len() != model.layout().len() {
        return Err(Error::DimensionMismatch { expected: model.layout().len(), got: sol.params.blocks().len() });
    }
    Ok((spec.range(), sol.params.block(block)))
}

fn check_point(blk: &ExpFamBlock, point: &[f64]) -> Result<()> {
    if point.len() != blk.family.point_dim() {
        return Err(Error::DimensionMismatch { expected: blk.family.point_dim(), got: point.len() });
    }
    Ok(())
}

/// Log prior density of a block at `point`, rejecting underflow.
fn prior_log_density(model: &ModelSpec, block: usize, point: &[f64]) -> Result<f64> {
    let lp = model.block_prior_log_density(block, point)?;
    if !(lp >= MIN_PRIOR_DENSITY.ln()) {
        return Err(Error::ZeroPriorDensity { log_density: lp });
    }
    Ok(lp)
}

/// `w^T (t(x) - m) q(x) / p(x)`. Shared by every Dirac-type evaluation so
/// that all of them agree to the last bit.
fn dirac_contraction(w: &[f64], blk: &ExpFamBlock, log_prior: f64, point: &[f64]) -> Result<f64> {
    let t = blk.family.sufficient_stats(point)?;
    let s: f64 = w.iter().zip(&t).zip(blk.mean.iter()).map(|((w, t), m)| w * (t - m)).sum();
    let ratio = (blk.log_density(point)? - log_prior).exp();
    Ok(s * ratio)
}

/// Integrates a vector-valued function of a block support point against
/// Lebesgue measure, with the transformation centered on `q`.
fn integrate_block<F>(blk: &ExpFamBlock, n: usize, f: F, opts: &QuadOptions) -> Result<QuadResult>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    match blk.family {
        Family::GaussianUnivariate => {
            let (mean, cov) = blk.gaussian_moments().ok_or_else(|| Error::Domain("not Gaussian".into()))?;
            let d = Domain::Real { center: mean[0], scale: cov[(0, 0)].sqrt() };
            integrate_vec(|x, out: &mut [f64]| f(&[x], out), n, d, opts)
        }
        Family::GaussianMultivariate { dim: 2 } => {
            let (mean, cov) = blk.gaussian_moments().ok_or_else(|| Error::Domain("not Gaussian".into()))?;
            let dx = Domain::Real { center: mean[0], scale: cov[(0, 0)].sqrt() };
            let dy = Domain::Real { center: mean[1], scale: cov[(1, 1)].sqrt() };
            integrate_2d(|x, y, out: &mut [f64]| f(&[x, y], out), n, dx, dy, opts)
        }
        Family::Gamma | Family::InverseGamma => {
            // mean[1] = E[log x] for both orientations
            let d = Domain::Positive { scale: blk.mean[1].exp() };
            integrate_vec(|x, out: &mut [f64]| f(&[x], out), n, d, opts)
        }
        other => Err(Error::InvalidInput(format!("no quadrature rule over the support of {other:?}"))),
    }
}

/// `E_q[(t - m) p_c / p]` over one block, with `log_weight(x) = log p_c(x) -
/// log p(x)` (so `q * exp(log_weight)` is the integrand weight).
fn weighted_centered_stats<W>(model: &ModelSpec, blk: &ExpFamBlock, block: usize, log_pc: W) -> Result<Vec<f64>>
where
    W: Fn(&[f64]) -> f64 + Sync,
{
    let n = blk.family.stat_dim();
    let err = std::sync::Mutex::new(None);
    let r = integrate_block(
        blk,
        n,
        |x, out| {
            out.iter_mut().for_each(|o| *o = 0.0);
            let lq = match blk.log_density(x) {
                Ok(v) => v,
                Err(_) => return,
            };
            let lc = log_pc(x);
            if lq == f64::NEG_INFINITY || lc == f64::NEG_INFINITY {
                return;
            }
            let lp = match model.block_prior_log_density(block, x) {
                Ok(v) => v,
                Err(e) => {
                    err.lock().unwrap().get_or_insert(e);
                    return;
                }
            };
            let w = (lq + lc - lp).exp();
            if let Ok(t) = blk.family.sufficient_stats(x) {
                for ((o, t), m) in out.iter_mut().zip(&t).zip(blk.mean.iter()) {
                    *o = (t - m) * w;
                }
            }
        },
        &contamination_quad_options(),
    )?;
    if let Some(e) = err.into_inner().unwrap() {
        return Err(e);
    }
    Ok(r.value)
}

fn check_normalized(blk: &ExpFamBlock, c: &dyn ContaminantDensity) -> Result<()> {
    if c.point_dim() != blk.family.point_dim() {
        return Err(Error::DimensionMismatch { expected: blk.family.point_dim(), got: c.point_dim() });
    }
    let r = integrate_block(blk, 1, |x, out| out[0] = c.log_density(x).exp(), &contamination_quad_options())?;
    if (r.value[0] - 1.0).abs() > 1e-4 {
        return Err(Error::InvalidInput(format!("contaminant integrates to {} over the block support", r.value[0])));
    }
    Ok(())
}

fn pad(dim: usize, range: std::ops::Range<usize>, local: &[f64]) -> DVector<f64> {
    let mut e = DVector::zeros(dim);
    e.rows_mut(range.start, range.len()).copy_from_slice(local);
    e
}

/// Right-hand side of the contamination system, restricted to the block.
fn contamination_rhs(model: &ModelSpec, sol: &VbSolution, spec: &ContaminationSpec) -> Result<Vec<f64>> {
    let (_, blk) = block_parts(model, sol, spec.block)?;
    match &spec.contaminant {
        Contaminant::Dirac(point) => {
            check_point(blk, point)?;
            let lp = prior_log_density(model, spec.block, point)?;
            let t = blk.family.sufficient_stats(point)?;
            let ratio = (blk.log_density(point)? - lp).exp();
            Ok(t.iter().zip(blk.mean.iter()).map(|(t, m)| (t - m) * ratio).collect())
        }
        Contaminant::PointMasses(atoms) => {
            check_weights(atoms)?;
            let mut acc = vec![0.0; blk.family.stat_dim()];
            for (w, point) in atoms {
                let one = ContaminationSpec { block: spec.block, contaminant: Contaminant::Dirac(point.clone()) };
                for (a, r) in acc.iter_mut().zip(contamination_rhs(model, sol, &one)?) {
                    *a += w * r;
                }
            }
            Ok(acc)
        }
        Contaminant::Density(c) => {
            check_normalized(blk, c.as_ref())?;
            weighted_centered_stats(model, blk, spec.block, |x| c.log_density(x))
        }
    }
}

/// `d E_q[theta] / d eps` under the contamination, as the full vector.
pub fn contamination_response(
    model: &ModelSpec,
    sol: &VbSolution,
    sys: &LrvbSystem,
    spec: &ContaminationSpec,
) -> Result<DVector<f64>> {
    let (range, _) = block_parts(model, sol, spec.block)?;
    let local = contamination_rhs(model, sol, spec)?;
    sys.solve(&pad(model.dim(), range, &local))
}

/// Derivative of `grad_h^T E_q[theta]` in the contamination weight at zero.
pub fn contamination_sensitivity(
    model: &ModelSpec,
    sol: &VbSolution,
    sys: &LrvbSystem,
    spec: &ContaminationSpec,
    grad_h: &DVector<f64>,
) -> Result<f64> {
    let (range, blk) = block_parts(model, sol, spec.block)?;
    let w = sys.solve_transpose(grad_h)?;
    let wi = &w.as_slice()[range];
    match &spec.contaminant {
        Contaminant::Dirac(point) => {
            check_point(blk, point)?;
            let lp = prior_log_density(model, spec.block, point)?;
            dirac_contraction(wi, blk, lp, point)
        }
        Contaminant::PointMasses(atoms) => {
            check_weights(atoms)?;
            atoms.iter().try_fold(0.0, |acc, (w, point)| {
                check_point(blk, point)?;
                let lp = prior_log_density(model, spec.block, point)?;
                Ok(acc + w * dirac_contraction(wi, blk, lp, point)?)
            })
        }
        Contaminant::Density(_) => {
            let local = contamination_rhs(model, sol, spec)?;
            Ok(wi.iter().zip(&local).map(|(a, b)| a * b).sum())
        }
    }
}

/// Influence function of a block at `point`: the full response vector to a
/// point-mass contamination there.
pub fn influence_function(
    model: &ModelSpec,
    sol: &VbSolution,
    sys: &LrvbSystem,
    block: usize,
    point: &[f64],
) -> Result<DVector<f64>> {
    let spec = ContaminationSpec { block, contaminant: Contaminant::Dirac(point.to_vec()) };
    contamination_response(model, sol, sys, &spec)
}

/// Scalar influence of a block on `grad_h^T E_q[theta]` at every point.
/// One adjoint solve serves the whole grid; points are evaluated in
/// parallel and each value equals `contamination_sensitivity` with the
/// matching Dirac contaminant exactly.
pub fn influence_grid(
    model: &ModelSpec,
    sol: &VbSolution,
    sys: &LrvbSystem,
    block: usize,
    points: &[Vec<f64>],
    grad_h: &DVector<f64>,
) -> Result<Vec<f64>> {
    let (range, blk) = block_parts(model, sol, block)?;
    let w = sys.solve_transpose(grad_h)?;
    let wi = &w.as_slice()[range];
    points
        .par_iter()
        .map(|p| {
            check_point(blk, p)?;
            let lp = prior_log_density(model, block, p)?;
            dirac_contraction(wi, blk, lp, p)
        })
        .collect()
}

/// `(integral of (p_c / p)^P p)^(1/P)` over the block support.
pub fn perturbation_norm(
    model: &ModelSpec,
    sol: &VbSolution,
    block: usize,
    contaminant: &dyn ContaminantDensity,
    p_norm: f64,
) -> Result<f64> {
    check_p_norm(p_norm)?;
    let (_, blk) = block_parts(model, sol, block)?;
    let err = std::sync::Mutex::new(None);
    let r = integrate_block(
        blk,
        1,
        |x, out| {
            out[0] = 0.0;
            let lc = contaminant.log_density(x);
            if lc == f64::NEG_INFINITY {
                return;
            }
            match model.block_prior_log_density(block, x) {
                Ok(lp) => out[0] = (p_norm * lc - (p_norm - 1.0) * lp).exp(),
                Err(e) => {
                    err.lock().unwrap().get_or_insert(e);
                }
            }
        },
        &contamination_quad_options(),
    )?;
    if let Some(e) = err.into_inner().unwrap() {
        return Err(e);
    }
    Ok(r.value[0].powf(1.0 / p_norm))
}

fn check_p_norm(p: f64) -> Result<()> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::InvalidInput(format!("perturbation norm exponent must be in (1, inf), got {p}")));
    }
    Ok(())
}

/// Extremal prior perturbation of one block for a quantity.
///
/// Perturbations are `p_c = p * phi` with `phi >= 0` and unit `L^P(prior)`
/// norm. The derivative along `phi` is `integral a(x) phi(x) p(x) dx` with
/// `a(x) = w^T (t(x) - m) q(x) / p(x)`, so the extremum is
/// `phi ~ (a^+)^(1/(P-1))` or `(a^-)^(1/(P-1))`, whichever side has the
/// larger `L^Q` norm of `a`.
#[derive(Debug, Clone, Serialize)]
pub struct WorstCase {
    pub block: usize,
    pub p_norm: f64,
    /// +1 when the extremal derivative is positive.
    pub sign: f64,
    /// Magnitude of the derivative along the extremal unit perturbation.
    pub attained_derivative: f64,
    pub positive_norm: f64,
    pub negative_norm: f64,
    weights: Vec<f64>,
    #[serde(skip)]
    q: ExpFamBlock,
    #[serde(skip)]
    model: ModelSpec,
    /// `integral (a^sign)^Q p`.
    side_integral: f64,
}

impl WorstCase {
    /// Contraction `a(x)`; zero where the prior underflows.
    pub fn a(&self, point: &[f64]) -> Result<f64> {
        check_point(&self.q, point)?;
        let lp = self.model.block_prior_log_density(self.block, point)?;
        if lp == f64::NEG_INFINITY {
            return Ok(0.0);
        }
        dirac_contraction(&self.weights, &self.q, lp, point)
    }

    /// Extremal perturbation `phi(x)` (unit `L^P(prior)` norm).
    pub fn phi(&self, point: &[f64]) -> Result<f64> {
        let a = (self.sign * self.a(point)?).max(0.0);
        let q_exp = self.p_norm / (self.p_norm - 1.0);
        Ok(a.powf(q_exp - 1.0) / self.side_integral.powf(1.0 / self.p_norm))
    }

    /// Extremal perturbation density `p(x) phi(x)`.
    pub fn worst_density(&self, point: &[f64]) -> Result<f64> {
        let phi = self.phi(point)?;
        if phi == 0.0 {
            return Ok(0.0);
        }
        Ok(self.model.block_prior_log_density(self.block, point)?.exp() * phi)
    }
}

pub fn worst_case_perturbation(
    model: &ModelSpec,
    sol: &VbSolution,
    sys: &LrvbSystem,
    block: usize,
    grad_h: &DVector<f64>,
    p_norm: f64,
) -> Result<WorstCase> {
    check_p_norm(p_norm)?;
    let (range, blk) = block_parts(model, sol, block)?;
    let w = sys.solve_transpose(grad_h)?;
    let weights = w.as_slice()[range].to_vec();
    let q_exp = p_norm / (p_norm - 1.0);
    let err = std::sync::Mutex::new(None);
    let r = integrate_block(
        blk,
        2,
        |x, out| {
            out[0] = 0.0;
            out[1] = 0.0;
            let lp = match model.block_prior_log_density(block, x) {
                Ok(v) => v,
                Err(e) => {
                    err.lock().unwrap().get_or_insert(e);
                    return;
                }
            };
            let (Ok(lq), Ok(t)) = (blk.log_density(x), blk.family.sufficient_stats(x)) else {
                return;
            };
            if lq == f64::NEG_INFINITY {
                return;
            }
            let s: f64 = weights.iter().zip(&t).zip(blk.mean.iter()).map(|((w, t), m)| w * (t - m)).sum();
            // |s|^Q q^Q p^(1-Q)
            let v = (q_exp * (s.abs().ln() + lq) - (q_exp - 1.0) * lp).exp();
            if s > 0.0 {
                out[0] = v;
            } else if s < 0.0 {
                out[1] = v;
            }
        },
        &contamination_quad_options(),
    )
    .map_err(|e| match e {
        Error::QuadratureFailure(msg) => Error::NormalizationFailure(msg),
        other => other,
    })?;
    if let Some(e) = err.into_inner().unwrap() {
        return Err(e);
    }
    let (ip, im) = (r.value[0], r.value[1]);
    if !(ip.is_finite() && im.is_finite()) {
        return Err(Error::NormalizationFailure(format!("L^Q integrals {ip}, {im}")));
    }
    let (np, nm) = (ip.powf(1.0 / q_exp), im.powf(1.0 / q_exp));
    let (sign, side_integral, attained) = if np >= nm { (1.0, ip, np) } else { (-1.0, im, nm) };
    if !(side_integral > 0.0) {
        return Err(Error::NormalizationFailure("the quantity does not depend on this block".into()));
    }
    Ok(WorstCase {
        block,
        p_norm,
        sign,
        attained_derivative: attained,
        positive_norm: np,
        negative_norm: nm,
        weights,
        q: blk.clone(),
        model: model.clone(),
        side_integral,
    })
}

#[cfg(test)]
mod tests;
