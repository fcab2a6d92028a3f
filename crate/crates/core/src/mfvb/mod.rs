//! Mean-field variational Bayes over exponential-family blocks.
//!
//! The objective is `ELBO(m) = L(m, alpha) + sum_k entropy_k(m_k)`, where `L`
//! is the expected log joint. Additive constants in the prior are dropped
//! wherever a model says so in its docs; they move the ELBO but never its
//! maximizer or any derivative.

mod optimize;

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expfam::{ExpFamBlock, Family};
use crate::oracle::{ExactPosterior, PosteriorTarget};

pub use optimize::{fit, FitOptions, VbSolution};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockSpec {
    pub name: String,
    pub family: Family,
    pub offset: usize,
}

impl BlockSpec {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.family.stat_dim()
    }
}

/// Ordered, non-overlapping partition of the full mean vector into blocks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Layout {
    blocks: Vec<BlockSpec>,
    dim: usize,
}

impl Layout {
    pub fn new<S: Into<String>>(blocks: impl IntoIterator<Item = (S, Family)>) -> Self {
        let mut offset = 0;
        let blocks = blocks
            .into_iter()
            .map(|(name, family)| {
                let b = BlockSpec { name: name.into(), family, offset };
                offset += family.stat_dim();
                b
            })
            .collect();
        Self { blocks, dim: offset }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> Result<&BlockSpec> {
        self.blocks
            .get(i)
            .ok_or_else(|| Error::InvalidInput(format!("block index {i} out of range (have {})", self.blocks.len())))
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    fn check(&self, m: &DVector<f64>) -> Result<()> {
        if m.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: m.len() });
        }
        Ok(())
    }
}

/// The variational distribution: one exponential-family factor per block.
#[derive(Debug, Clone, PartialEq)]
pub struct VarParams {
    blocks: Vec<ExpFamBlock>,
    mean: DVector<f64>,
}

impl VarParams {
    pub fn from_blocks(layout: &Layout, blocks: Vec<ExpFamBlock>) -> Result<Self> {
        if blocks.len() != layout.len() {
            return Err(Error::DimensionMismatch { expected: layout.len(), got: blocks.len() });
        }
        let mut mean = DVector::zeros(layout.dim());
        for (spec, b) in layout.blocks().iter().zip(&blocks) {
            if spec.family != b.family {
                return Err(Error::InvalidInput(format!("block {} expects {:?}, got {:?}", spec.name, spec.family, b.family)));
            }
            mean.rows_mut(spec.offset, b.dim()).copy_from(&b.mean);
        }
        Ok(Self { blocks, mean })
    }

    pub fn from_mean(layout: &Layout, m: &DVector<f64>) -> Result<Self> {
        layout.check(m)?;
        let blocks = layout
            .blocks()
            .iter()
            .map(|b| ExpFamBlock::from_mean(b.family, &m.as_slice()[b.range()]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, mean: m.clone() })
    }

    pub fn from_natural(layout: &Layout, eta: &DVector<f64>) -> Result<Self> {
        layout.check(eta)?;
        let blocks = layout
            .blocks()
            .iter()
            .map(|b| ExpFamBlock::from_natural(b.family, &eta.as_slice()[b.range()]))
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(layout, blocks)
    }

    pub fn blocks(&self) -> &[ExpFamBlock] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &ExpFamBlock {
        &self.blocks[i]
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn natural(&self) -> DVector<f64> {
        let parts: Vec<f64> = self.blocks.iter().flat_map(|b| b.natural.iter().copied()).collect();
        DVector::from_vec(parts)
    }

    pub fn entropy(&self) -> Result<f64> {
        self.blocks.iter().map(|b| b.entropy()).sum()
    }

    /// Block-diagonal covariance of the sufficient statistics.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let n = self.mean.len();
        let mut v = DMatrix::zeros(n, n);
        let mut off = 0;
        for b in &self.blocks {
            let c = b.suff_stat_covariance()?;
            let d = b.dim();
            v.view_mut((off, off), (d, d)).copy_from(&c);
            off += d;
        }
        Ok(v)
    }

    pub fn unconstrained(&self) -> Result<Vec<f64>> {
        let mut u = Vec::with_capacity(self.mean.len());
        for b in &self.blocks {
            u.extend(b.unconstrained()?);
        }
        Ok(u)
    }
}

/// A scalar posterior summary `E_q[g(theta)]` that is linear in `m`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Quantity {
    pub name: String,
    pub index: usize,
}

impl Quantity {
    pub fn new(name: impl Into<String>, index: usize) -> Self {
        Self { name: name.into(), index }
    }

    pub fn gradient(&self, dim: usize) -> DVector<f64> {
        let mut g = DVector::zeros(dim);
        g[self.index] = 1.0;
        g
    }
}

/// Expected log joint of a model, as a function of the variational mean
/// parameters and the hyperparameters.
///
/// `gradient` and `hessian` are with respect to the full mean vector `m`.
/// The defaults for `hessian` and `hyper_cross_gradient` are central finite
/// differences; models with closed forms override them.
pub trait LogJoint: Send + Sync {
    fn name(&self) -> &str;

    fn layout(&self) -> &Layout;

    fn hyper_names(&self) -> Vec<String>;

    fn check_hyper(&self, _alpha: &[f64]) -> Result<()> {
        Ok(())
    }

    fn expected_log_lik(&self, q: &VarParams) -> Result<f64>;

    fn expected_log_prior(&self, q: &VarParams, alpha: &[f64]) -> Result<f64>;

    fn gradient(&self, q: &VarParams, alpha: &[f64]) -> Result<DVector<f64>>;

    fn hessian(&self, q: &VarParams, alpha: &[f64]) -> Result<DMatrix<f64>> {
        fd_hessian(self, q, alpha)
    }

    /// `d/dm [ dL/dalpha . dalpha ]`; the likelihood never depends on alpha.
    fn hyper_cross_gradient(&self, q: &VarParams, alpha: &[f64], dalpha: &[f64]) -> Result<DVector<f64>> {
        fd_hyper_cross_gradient(self, q, alpha, dalpha)
    }

    /// Prior-implied starting point.
    fn initial_params(&self, alpha: &[f64]) -> Result<VarParams>;

    /// Marginal prior log density of block `block` at a support point, when
    /// the prior factorizes across that block.
    fn block_prior_log_density(&self, block: usize, _point: &[f64], _alpha: &[f64]) -> Result<f64> {
        Err(Error::NotFactorized(block))
    }

    /// Tracked posterior means, by default the mean coordinates of every
    /// Gaussian block.
    fn quantities(&self) -> Vec<Quantity> {
        let mut out = Vec::new();
        for b in self.layout().blocks() {
            let d = match b.family {
                Family::GaussianUnivariate => 1,
                Family::GaussianMultivariate { dim } => dim,
                _ => continue,
            };
            for j in 0..d {
                let name = if d == 1 { b.name.clone() } else { format!("{}[{j}]", b.name) };
                out.push(Quantity::new(name, b.offset + j));
            }
        }
        out
    }

    /// Stable digest of the data and structure, used to tag reports.
    fn fingerprint(&self) -> String;

    fn exact_posterior(&self, _alpha: &[f64]) -> Result<ExactPosterior> {
        Err(Error::NotConjugate(format!("no closed-form posterior for model `{}`", self.name())))
    }

    /// The exact (unnormalized) posterior, for the brute-force oracles.
    fn posterior_target(&self) -> Option<&dyn PosteriorTarget> {
        None
    }
}

fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1e-3)
}

/// Central differences of the analytic gradient in mean coordinates.
pub fn fd_hessian<J: LogJoint + ?Sized>(model: &J, q: &VarParams, alpha: &[f64]) -> Result<DMatrix<f64>> {
    let layout = model.layout();
    let m = q.mean();
    let n = m.len();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let step = fd_step(m[j]);
        let mut mp = m.clone();
        mp[j] += step;
        let mut mm = m.clone();
        mm[j] -= step;
        let gp = model.gradient(&VarParams::from_mean(layout, &mp)?, alpha)?;
        let gm = model.gradient(&VarParams::from_mean(layout, &mm)?, alpha)?;
        h.set_column(j, &((gp - gm) / (2.0 * step)));
    }
    Ok(crate::linalg::symmetrize(&h))
}

pub fn fd_hyper_cross_gradient<J: LogJoint + ?Sized>(
    model: &J,
    q: &VarParams,
    alpha: &[f64],
    dalpha: &[f64],
) -> Result<DVector<f64>> {
    if dalpha.len() != alpha.len() {
        return Err(Error::DimensionMismatch { expected: alpha.len(), got: dalpha.len() });
    }
    let scale = dalpha.iter().fold(0.0f64, |a, d| a.max(d.abs()));
    if scale == 0.0 {
        return Ok(DVector::zeros(q.mean().len()));
    }
    let amax = alpha.iter().fold(1.0f64, |a, x| a.max(x.abs()));
    let t = 1e-6 * amax / scale;
    let shifted = |s: f64| -> Vec<f64> { alpha.iter().zip(dalpha).map(|(a, d)| a + s * d).collect() };
    let (ap, am) = (shifted(t), shifted(-t));
    for a in [&ap, &am] {
        model
            .check_hyper(a)
            .map_err(|e| Error::NonDifferentiablePrior(format!("hyperparameter step leaves the prior domain: {e}")))?;
    }
    let gp = model.gradient(q, &ap)?;
    let gm = model.gradient(q, &am)?;
    Ok((gp - gm) / (2.0 * t))
}

/// A model paired with a hyperparameter value.
#[derive(Clone)]
pub struct ModelSpec {
    joint: Arc<dyn LogJoint>,
    alpha: Vec<f64>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec").field("model", &self.joint.name()).field("alpha", &self.alpha).finish()
    }
}

impl ModelSpec {
    pub fn new(joint: Arc<dyn LogJoint>, alpha: Vec<f64>) -> Result<Self> {
        let names = joint.hyper_names();
        if alpha.len() != names.len() {
            return Err(Error::DimensionMismatch { expected: names.len(), got: alpha.len() });
        }
        joint.check_hyper(&alpha)?;
        Ok(Self { joint, alpha })
    }

    pub fn joint(&self) -> &dyn LogJoint {
        self.joint.as_ref()
    }

    pub fn name(&self) -> &str {
        self.joint.name()
    }

    pub fn layout(&self) -> &Layout {
        self.joint.layout()
    }

    pub fn dim(&self) -> usize {
        self.layout().dim()
    }

    pub fn hyperparams(&self) -> &[f64] {
        &self.alpha
    }

    pub fn hyper_names(&self) -> Vec<String> {
        self.joint.hyper_names()
    }

    pub fn hyper_index(&self, name: &str) -> Result<usize> {
        let names = self.hyper_names();
        names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownHyperparameter { name: name.to_string(), valid: names.join(", ") })
    }

    /// Unit direction along the named hyperparameter.
    pub fn hyper_direction(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.hyper_index(name)?;
        let mut d = vec![0.0; self.alpha.len()];
        d[j] = 1.0;
        Ok(d)
    }

    pub fn with_hyperparams(&self, alpha: Vec<f64>) -> Result<Self> {
        Self::new(self.joint.clone(), alpha)
    }

    pub fn with_override(&self, name: &str, value: f64) -> Result<Self> {
        let j = self.hyper_index(name)?;
        let mut a = self.alpha.clone();
        a[j] = value;
        self.with_hyperparams(a)
    }

    /// Moves the hyperparameters by `t * dalpha`.
    pub fn shifted(&self, dalpha: &[f64], t: f64) -> Result<Self> {
        if dalpha.len() != self.alpha.len() {
            return Err(Error::DimensionMismatch { expected: self.alpha.len(), got: dalpha.len() });
        }
        self.with_hyperparams(self.alpha.iter().zip(dalpha).map(|(a, d)| a + t * d).collect())
    }

    pub fn expected_log_joint(&self, q: &VarParams) -> Result<f64> {
        Ok(self.joint.expected_log_lik(q)? + self.joint.expected_log_prior(q, &self.alpha)?)
    }

    pub fn elbo_at(&self, q: &VarParams) -> Result<f64> {
        let v = self.expected_log_joint(q)? + q.entropy()?;
        if !v.is_finite() {
            return Err(Error::Domain(format!("ELBO is not finite ({v})")));
        }
        Ok(v)
    }

    pub fn gradient(&self, q: &VarParams) -> Result<DVector<f64>> {
        self.joint.gradient(q, &self.alpha)
    }

    pub fn hessian(&self, q: &VarParams) -> Result<DMatrix<f64>> {
        self.joint.hessian(q, &self.alpha)
    }

    pub fn hyper_cross_gradient(&self, q: &VarParams, dalpha: &[f64]) -> Result<DVector<f64>> {
        if dalpha.len() != self.alpha.len() {
            return Err(Error::DimensionMismatch { expected: self.alpha.len(), got: dalpha.len() });
        }
        self.joint.hyper_cross_gradient(q, &self.alpha, dalpha)
    }

    pub fn initial_params(&self) -> Result<VarParams> {
        self.joint.initial_params(&self.alpha)
    }

    pub fn block_prior_log_density(&self, block: usize, point: &[f64]) -> Result<f64> {
        self.joint.block_prior_log_density(block, point, &self.alpha)
    }

    pub fn quantities(&self) -> Vec<Quantity> {
        self.joint.quantities()
    }

    pub fn exact_posterior(&self) -> Result<ExactPosterior> {
        self.joint.exact_posterior(&self.alpha)
    }

    pub fn posterior_target(&self) -> Option<&dyn PosteriorTarget> {
        self.joint.posterior_target()
    }

    pub fn fingerprint(&self) -> String {
        let alpha: Vec<String> = self.alpha.iter().map(|a| format!("{:e}", a)).collect();
        format!("{}|{}", self.joint.fingerprint(), alpha.join(","))
    }
}

/// `L(m) - E_q[log q]` at mean vector `m`.
pub fn elbo(model: &ModelSpec, m: &DVector<f64>) -> Result<f64> {
    let q = VarParams::from_mean(model.layout(), m)?;
    model.elbo_at(&q)
}

/// `d ELBO / d m = grad L - eta`, since the entropy is `A(eta) - eta . m`.
pub fn elbo_gradient(model: &ModelSpec, q: &VarParams) -> Result<DVector<f64>> {
    Ok(model.gradient(q)? - q.natural())
}

#[cfg(test)]
mod tests;
