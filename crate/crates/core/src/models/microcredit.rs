//! Hierarchical treatment-effect model across sites.
//!
//! ```text
//! y_ik | mu_k, tau_k, sigma2_k ~ N(mu_k + T_ik tau_k, sigma2_k)
//! (mu_k, tau_k)               ~ N((mu, tau), C)
//! (mu, tau)                   ~ N(0, Lambda_prior^{-1})
//! sigma2_k                    ~ InverseGamma(sigma_alpha, sigma_beta)
//! C = S R S,  S_kk^2          ~ InverseGamma(scale_alpha, scale_beta)
//! p(R)                        ∝ |R|^(lkj_eta - 1)
//! ```
//!
//! Variational family: a bivariate Gaussian for `(mu, tau)` and for each
//! `(mu_k, tau_k)`, an inverse gamma for each `sigma2_k`, and a Wishart for
//! `Lambda = C^{-1}`.
//!
//! The prior on `C` is carried over to `Lambda` with both Jacobians, so it
//! is a proper density that the exact sampler can target too:
//!
//! * `(C11, C22, r) -> C` contributes `-(log C11 + log C22) / 2`;
//! * `C -> Lambda` contributes `-3 log|Lambda|`.
//!
//! With `log|R| = -log|Lambda| - sum_k log C_kk`, every term of the expected
//! log joint is either multilinear in the block means or a function of the
//! Wishart natural parameters through `E log C_kk` and `E[1 / C_kk]`.
//! No constants are dropped.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::fingerprint_of;
use super::polynomial::Polynomial;
use crate::error::{domain, Error, Result};
use crate::expfam::wishart::sigma_diag_moment_gradients;
use crate::expfam::{wishart_expectations, ExpFamBlock, Family};
use crate::mfvb::{Layout, LogJoint, ModelSpec, Quantity, VarParams};
use crate::oracle::PosteriorTarget;
use crate::special::{digamma, ln_beta, ln_gamma, trigamma};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub treatment: Vec<bool>,
    pub outcome: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrocreditData {
    /// Site labels in order of first appearance in the input.
    pub labels: Vec<String>,
    pub sites: Vec<Site>,
}

#[derive(Debug, Deserialize)]
struct Record {
    site: String,
    treatment: String,
    outcome: f64,
}

impl MicrocreditData {
    pub fn new(sites: Vec<Site>) -> Result<Self> {
        let labels = (0..sites.len()).map(|k| k.to_string()).collect();
        let d = Self { labels, sites };
        d.validate()?;
        Ok(d)
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.sites.iter().map(|s| s.outcome.len()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.sites.len() {
            return Err(Error::InvalidInput("one label per site required".into()));
        }
        for (label, s) in self.labels.iter().zip(&self.sites) {
            if s.outcome.is_empty() {
                return Err(Error::InvalidInput(format!("site {label} has no observations")));
            }
            if s.treatment.len() != s.outcome.len() {
                return Err(Error::InvalidInput(format!("site {label}: treatment and outcome lengths differ")));
            }
            if s.outcome.iter().any(|y| !y.is_finite()) {
                return Err(Error::InvalidInput(format!("site {label}: non-finite outcome")));
            }
        }
        Ok(())
    }

    /// Reads `site,treatment,outcome` rows; treatment must be 0 or 1.
    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers()?.clone();
        for col in ["site", "treatment", "outcome"] {
            if !headers.iter().any(|h| h == col) {
                return Err(Error::InvalidInput(format!("missing CSV column `{col}`")));
            }
        }
        let mut labels: Vec<String> = Vec::new();
        let mut sites: Vec<Site> = Vec::new();
        for (line, rec) in rdr.deserialize::<Record>().enumerate() {
            let rec = rec.map_err(|e| Error::InvalidInput(format!("row {}: {e}", line + 2)))?;
            let t = match rec.treatment.as_str() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::InvalidInput(format!("row {}: treatment must be 0 or 1, got `{other}`", line + 2)))
                }
            };
            if !rec.outcome.is_finite() {
                return Err(Error::InvalidInput(format!("row {}: non-finite outcome", line + 2)));
            }
            let k = match labels.iter().position(|l| *l == rec.site) {
                Some(k) => k,
                None => {
                    labels.push(rec.site.clone());
                    sites.push(Site { treatment: Vec::new(), outcome: Vec::new() });
                    labels.len() - 1
                }
            };
            sites[k].treatment.push(t);
            sites[k].outcome.push(rec.outcome);
        }
        let d = Self { labels, sites };
        d.validate()?;
        Ok(d)
    }

    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())
            .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_reader(f)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["site", "treatment", "outcome"])?;
        for (label, s) in self.labels.iter().zip(&self.sites) {
            for (t, y) in s.treatment.iter().zip(&s.outcome) {
                let t = if *t { "1" } else { "0" };
                wtr.write_record([label.as_str(), t, &format!("{y:.17e}")])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Generative parameters for synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrocreditTruth {
    pub mu: f64,
    pub tau: f64,
    /// Covariance of `(mu_k, tau_k)` around `(mu, tau)`.
    pub cov: [[f64; 2]; 2],
    /// One noise variance per site.
    pub sigma2: Vec<f64>,
    pub treat_prob: f64,
}

impl Default for MicrocreditTruth {
    fn default() -> Self {
        Self {
            mu: 5.0,
            tau: 1.5,
            cov: [[1.0, 0.2], [0.2, 0.8]],
            sigma2: vec![30.0, 35.0, 40.0, 45.0, 50.0, 55.0, 60.0],
            treat_prob: 0.5,
        }
    }
}

/// Draws a dataset from the generative process. Site effects are drawn
/// first, then each site's observations, all from one seeded stream.
pub fn simulate_microcredit(truth: &MicrocreditTruth, counts: &[usize], seed: u64) -> Result<MicrocreditData> {
    let k = counts.len();
    if truth.sigma2.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: truth.sigma2.len() });
    }
    if truth.sigma2.iter().any(|s| !(*s > 0.0)) {
        return domain("noise variances must be positive");
    }
    let c = DMatrix::from_row_slice(2, 2, &[truth.cov[0][0], truth.cov[0][1], truth.cov[1][0], truth.cov[1][1]]);
    let Some(ch) = c.clone().cholesky() else {
        return domain("effect covariance must be positive definite");
    };
    let bern = Bernoulli::new(truth.treat_prob).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let l = ch.l();
    let effects: Vec<(f64, f64)> = (0..k)
        .map(|_| {
            let z = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let e = &l * z;
            (truth.mu + e[0], truth.tau + e[1])
        })
        .collect();
    let mut sites = Vec::with_capacity(k);
    for (j, &n) in counts.iter().enumerate() {
        let (mk, tk) = effects[j];
        let sd = truth.sigma2[j].sqrt();
        let mut s = Site { treatment: Vec::with_capacity(n), outcome: Vec::with_capacity(n) };
        for _ in 0..n {
            let t = bern.sample(&mut rng);
            let eps: f64 = rng.sample(StandardNormal);
            s.treatment.push(t);
            s.outcome.push(mk + if t { tk } else { 0.0 } + sd * eps);
        }
        sites.push(s);
    }
    MicrocreditData::new(sites)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicrocreditPriors {
    /// Prior precision of `(mu, tau)`.
    pub lambda: [[f64; 2]; 2],
    pub lkj_eta: f64,
    pub scale_alpha: f64,
    pub scale_beta: f64,
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
}

impl Default for MicrocreditPriors {
    fn default() -> Self {
        Self {
            lambda: [[0.02, 0.0], [0.0, 0.02]],
            lkj_eta: 15.01,
            scale_alpha: 20.01,
            scale_beta: 20.01,
            sigma_alpha: 2.01,
            sigma_beta: 2.01,
        }
    }
}

impl MicrocreditPriors {
    pub const NAMES: [&'static str; 8] = [
        "lambda_11",
        "lambda_12",
        "lambda_22",
        "lkj_eta",
        "scale_alpha",
        "scale_beta",
        "sigma_alpha",
        "sigma_beta",
    ];

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.lambda[0][0],
            self.lambda[0][1],
            self.lambda[1][1],
            self.lkj_eta,
            self.scale_alpha,
            self.scale_beta,
            self.sigma_alpha,
            self.sigma_beta,
        ]
    }

    pub fn from_slice(a: &[f64]) -> Result<Self> {
        if a.len() != 8 {
            return Err(Error::DimensionMismatch { expected: 8, got: a.len() });
        }
        Ok(Self {
            lambda: [[a[0], a[1]], [a[1], a[2]]],
            lkj_eta: a[3],
            scale_alpha: a[4],
            scale_beta: a[5],
            sigma_alpha: a[6],
            sigma_beta: a[7],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.to_vec();
        if v.iter().any(|x| !x.is_finite()) {
            return domain("prior parameters must be finite");
        }
        let l = self.lambda;
        if !(l[0][0] > 0.0 && l[0][0] * l[1][1] - l[0][1] * l[1][0] > 0.0) {
            return domain("prior precision of (mu, tau) must be positive definite");
        }
        if !(self.lkj_eta > 0.0) {
            return domain("lkj_eta must be positive");
        }
        if !(self.scale_alpha > 0.0 && self.scale_beta > 0.0 && self.sigma_alpha > 0.0 && self.sigma_beta > 0.0) {
            return domain("inverse-gamma shapes and scales must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct SiteStats {
    n: f64,
    n1: f64,
    sy: f64,
    syy: f64,
    sty: f64,
}

/// Index map of the mean vector.
#[derive(Debug, Clone, Copy)]
struct Idx {
    k: usize,
}

impl Idx {
    fn global(&self, i: usize) -> usize {
        i
    }
    fn site(&self, k: usize, i: usize) -> usize {
        5 + 5 * k + i
    }
    fn inv_sigma2(&self, k: usize) -> usize {
        5 + 5 * self.k + 2 * k
    }
    fn log_sigma2(&self, k: usize) -> usize {
        self.inv_sigma2(k) + 1
    }
    fn wishart(&self, i: usize) -> usize {
        5 + 7 * self.k + i
    }
    fn wishart_block(&self) -> usize {
        1 + 2 * self.k
    }
}

#[derive(Debug, Clone)]
pub struct Microcredit {
    data: MicrocreditData,
    stats: Vec<SiteStats>,
    idx: Idx,
    layout: Layout,
    lik: Polynomial,
}

const W: Family = Family::Wishart { dim: 2 };

impl Microcredit {
    pub fn new(data: MicrocreditData) -> Result<Self> {
        data.validate()?;
        let k = data.num_sites();
        if k < 2 {
            return domain(format!("the effect covariance needs at least 2 sites, got {k}"));
        }
        let stats: Vec<SiteStats> = data
            .sites
            .iter()
            .map(|s| {
                let mut st = SiteStats { n: 0.0, n1: 0.0, sy: 0.0, syy: 0.0, sty: 0.0 };
                for (&t, &y) in s.treatment.iter().zip(&s.outcome) {
                    st.n += 1.0;
                    st.sy += y;
                    st.syy += y * y;
                    if t {
                        st.n1 += 1.0;
                        st.sty += y;
                    }
                }
                st
            })
            .collect();
        let mut blocks = vec![("global".to_string(), Family::GaussianMultivariate { dim: 2 })];
        blocks.extend((0..k).map(|j| (format!("site[{j}]"), Family::GaussianMultivariate { dim: 2 })));
        blocks.extend((0..k).map(|j| (format!("sigma2[{j}]"), Family::InverseGamma)));
        blocks.push(("lambda".to_string(), W));
        let layout = Layout::new(blocks);
        let idx = Idx { k };
        let lik = Self::likelihood_polynomial(&stats, idx);
        Ok(Self { data, stats, idx, layout, lik })
    }

    pub fn data(&self) -> &MicrocreditData {
        &self.data
    }

    pub fn num_sites(&self) -> usize {
        self.idx.k
    }

    fn likelihood_polynomial(stats: &[SiteStats], ix: Idx) -> Polynomial {
        let mut p = Polynomial::new();
        for (k, s) in stats.iter().enumerate() {
            let r = ix.inv_sigma2(k);
            let sk = |i| ix.site(k, i);
            p.constant -= 0.5 * s.n * LN_2PI;
            p.add(-0.5 * s.n, &[ix.log_sigma2(k)]);
            // -E[1/sigma2] E[sum (y - mu_k - T tau_k)^2] / 2
            p.add(-0.5 * s.syy, &[r]);
            p.add(s.sy, &[r, sk(0)]);
            p.add(s.sty, &[r, sk(1)]);
            p.add(-0.5 * s.n, &[r, sk(2)]);
            p.add(-s.n1, &[r, sk(3)]);
            p.add(-0.5 * s.n1, &[r, sk(4)]);
        }
        p
    }

    /// Terms of the expected log prior that are multilinear in the means.
    fn prior_polynomial(&self, pr: &MicrocreditPriors) -> Polynomial {
        let ix = self.idx;
        let g = |i| ix.global(i);
        let w = |i| ix.wishart(i);
        let mut p = Polynomial::new();
        for k in 0..ix.k {
            let s = |i| ix.site(k, i);
            // (mu_k, tau_k) ~ N((mu, tau), Lambda^{-1})
            p.constant -= LN_2PI;
            p.add(0.5, &[w(3)]);
            p.add(-0.5, &[w(0), s(2)]);
            p.add(1.0, &[w(0), s(0), g(0)]);
            p.add(-0.5, &[w(0), g(2)]);
            p.add(-1.0, &[w(1), s(3)]);
            p.add(1.0, &[w(1), s(0), g(1)]);
            p.add(1.0, &[w(1), g(0), s(1)]);
            p.add(-1.0, &[w(1), g(3)]);
            p.add(-0.5, &[w(2), s(4)]);
            p.add(1.0, &[w(2), s(1), g(1)]);
            p.add(-0.5, &[w(2), g(4)]);
            // sigma2_k ~ InverseGamma
            p.constant += pr.sigma_alpha * pr.sigma_beta.ln() - ln_gamma(pr.sigma_alpha);
            p.add(-(pr.sigma_alpha + 1.0), &[ix.log_sigma2(k)]);
            p.add(-pr.sigma_beta, &[ix.inv_sigma2(k)]);
        }
        // (mu, tau) ~ N(0, Lambda_prior^{-1})
        let l = pr.lambda;
        let ld_prior = (l[0][0] * l[1][1] - l[0][1] * l[1][0]).ln();
        p.constant += -LN_2PI + 0.5 * ld_prior;
        p.add(-0.5 * l[0][0], &[g(2)]);
        p.add(-l[0][1], &[g(3)]);
        p.add(-0.5 * l[1][1], &[g(4)]);
        // covariance prior: log|Lambda| parts of the LKJ term and Jacobian
        p.add(-(pr.lkj_eta - 1.0) - 3.0, &[w(3)]);
        p.constant += 2.0 * (pr.scale_alpha * pr.scale_beta.ln() - ln_gamma(pr.scale_alpha));
        p.constant -= lkj_log_normalizer(pr.lkj_eta);
        p
    }

    /// Coefficients of `sum_k E log C_kk` and `sum_k E[1/C_kk]`.
    fn scale_coefficients(pr: &MicrocreditPriors) -> (f64, f64) {
        (-(pr.scale_alpha + 1.0) - (pr.lkj_eta - 1.0) - 0.5, -pr.scale_beta)
    }

    fn wishart_block<'a>(&self, q: &'a VarParams) -> &'a ExpFamBlock {
        q.block(self.idx.wishart_block())
    }

    /// Value of the non-polynomial covariance-prior terms.
    fn scale_value(&self, wb: &ExpFamBlock, pr: &MicrocreditPriors) -> Result<f64> {
        let p = wb.wishart_params().ok_or_else(|| Error::Domain("Wishart block out of domain".into()))?;
        let e = wishart_expectations(p.dof, &p.scale)?;
        let (cl, ci) = Self::scale_coefficients(pr);
        Ok(cl * e.log_sigma_diag.sum() + ci * e.inv_sigma_diag.sum())
    }

    /// Sums over k of `d E log C_kk / d eta` and `d E[1/C_kk] / d eta`.
    fn scale_natural_gradients(wb: &ExpFamBlock) -> Result<(DVector<f64>, DVector<f64>)> {
        let parts = sigma_diag_moment_gradients(wb.natural.as_slice(), 2)?;
        let mut dl = DVector::zeros(4);
        let mut di = DVector::zeros(4);
        for (a, b) in parts {
            dl += DVector::from_vec(a);
            di += DVector::from_vec(b);
        }
        Ok((dl, di))
    }

    /// Mean-parameter gradient `V^{-1} d/d eta` of a natural-parameter
    /// function on the Wishart block.
    fn to_mean_gradient(wb: &ExpFamBlock, g_eta: &DVector<f64>) -> Result<DVector<f64>> {
        let v = wb.suff_stat_covariance()?;
        let Some(ch) = v.cholesky() else {
            return domain("Wishart statistic covariance is not positive definite");
        };
        Ok(ch.solve(g_eta))
    }

    fn scale_mean_gradient(wb: &ExpFamBlock, pr: &MicrocreditPriors) -> Result<DVector<f64>> {
        let (dl, di) = Self::scale_natural_gradients(wb)?;
        let (cl, ci) = Self::scale_coefficients(pr);
        Self::to_mean_gradient(wb, &(dl * cl + di * ci))
    }

    /// Wishart-block Hessian of the non-polynomial terms: central
    /// differences of the mean gradient through the numerically inverted
    /// mean-to-natural map, with steps 1e-5 relative to the larger of the
    /// coordinate and its standard deviation under q.
    fn scale_mean_hessian(wb: &ExpFamBlock, pr: &MicrocreditPriors) -> Result<DMatrix<f64>> {
        let v = wb.suff_stat_covariance()?;
        let m = &wb.mean;
        let mut h = DMatrix::zeros(4, 4);
        for j in 0..4 {
            let step = 1e-5 * m[j].abs().max(v[(j, j)].sqrt());
            let mut mp = m.clone();
            mp[j] += step;
            let mut mm = m.clone();
            mm[j] -= step;
            let gp = Self::scale_mean_gradient(&ExpFamBlock::from_mean(W, mp.as_slice())?, pr)?;
            let gm = Self::scale_mean_gradient(&ExpFamBlock::from_mean(W, mm.as_slice())?, pr)?;
            h.set_column(j, &((gp - gm) / (2.0 * step)));
        }
        Ok(crate::linalg::symmetrize(&h))
    }
}

/// Log normalizer of the LKJ density on 2x2 correlation matrices:
/// `log integral (1 - r^2)^(eta - 1) dr = log B(1/2, eta)`.
pub fn lkj_log_normalizer(eta: f64) -> f64 {
    ln_beta(0.5, eta)
}

impl LogJoint for Microcredit {
    fn name(&self) -> &str {
        "microcredit"
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn hyper_names(&self) -> Vec<String> {
        MicrocreditPriors::NAMES.iter().map(|s| s.to_string()).collect()
    }

    fn check_hyper(&self, alpha: &[f64]) -> Result<()> {
        MicrocreditPriors::from_slice(alpha)?.validate()
    }

    fn expected_log_lik(&self, q: &VarParams) -> Result<f64> {
        Ok(self.lik.value(q.mean()))
    }

    fn expected_log_prior(&self, q: &VarParams, alpha: &[f64]) -> Result<f64> {
        let pr = MicrocreditPriors::from_slice(alpha)?;
        Ok(self.prior_polynomial(&pr).value(q.mean()) + self.scale_value(self.wishart_block(q), &pr)?)
    }

    fn gradient(&self, q: &VarParams, alpha: &[f64]) -> Result<DVector<f64>> {
        let pr = MicrocreditPriors::from_slice(alpha)?;
        let m = q.mean();
        let mut g = DVector::zeros(m.len());
        self.lik.add_gradient(m, &mut g);
        self.prior_polynomial(&pr).add_gradient(m, &mut g);
        let gw = Self::scale_mean_gradient(self.wishart_block(q), &pr)?;
        let w0 = self.idx.wishart(0);
        for i in 0..4 {
            g[w0 + i] += gw[i];
        }
        Ok(g)
    }

    fn hessian(&self, q: &VarParams, alpha: &[f64]) -> Result<DMatrix<f64>> {
        let pr = MicrocreditPriors::from_slice(alpha)?;
        let m = q.mean();
        let n = m.len();
        let mut h = DMatrix::zeros(n, n);
        self.lik.add_hessian(m, &mut h);
        self.prior_polynomial(&pr).add_hessian(m, &mut h);
        let hw = Self::scale_mean_hessian(self.wishart_block(q), &pr)?;
        let w0 = self.idx.wishart(0);
        let mut view = h.view_mut((w0, w0), (4, 4));
        view += hw;
        Ok(h)
    }

    fn hyper_cross_gradient(&self, q: &VarParams, alpha: &[f64], dalpha: &[f64]) -> Result<DVector<f64>> {
        if dalpha.len() != 8 {
            return Err(Error::DimensionMismatch { expected: 8, got: dalpha.len() });
        }
        MicrocreditPriors::from_slice(alpha)?.validate()?;
        let ix = self.idx;
        let wb = self.wishart_block(q);
        let mut g = DVector::zeros(self.layout.dim());
        g[ix.global(2)] -= 0.5 * dalpha[0];
        g[ix.global(3)] -= dalpha[1];
        g[ix.global(4)] -= 0.5 * dalpha[2];
        let (dl, di) = Self::scale_natural_gradients(wb)?;
        // lkj_eta and scale_alpha both multiply -sum E log C_kk; scale_beta
        // multiplies -sum E[1 / C_kk]
        let g_eta = dl * (-(dalpha[3] + dalpha[4])) - di * dalpha[5];
        let gw = Self::to_mean_gradient(wb, &g_eta)?;
        for i in 0..4 {
            g[ix.wishart(i)] += gw[i];
        }
        g[ix.wishart(3)] -= dalpha[3];
        for k in 0..ix.k {
            g[ix.log_sigma2(k)] -= dalpha[6];
            g[ix.inv_sigma2(k)] -= dalpha[7];
        }
        Ok(g)
    }

    fn initial_params(&self, alpha: &[f64]) -> Result<VarParams> {
        let pr = MicrocreditPriors::from_slice(alpha)?;
        pr.validate()?;
        let l = &pr.lambda;
        let lp = DMatrix::from_row_slice(2, 2, &[l[0][0], l[0][1], l[1][0], l[1][1]]);
        let cov0 = crate::linalg::inverse_pd(&lp).ok_or_else(|| Error::Domain("prior precision not PD".into()))?;
        let mut blocks = vec![ExpFamBlock::gaussian_mv(&DVector::zeros(2), &cov0)?];
        // prior mean of C_kk when finite, else its scale
        let c_kk = if pr.scale_alpha > 1.0 { pr.scale_beta / (pr.scale_alpha - 1.0) } else { pr.scale_beta };
        let site_cov = DMatrix::from_diagonal_element(2, 2, c_kk);
        for _ in 0..self.idx.k {
            blocks.push(ExpFamBlock::gaussian_mv(&DVector::zeros(2), &site_cov)?);
        }
        for _ in 0..self.idx.k {
            blocks.push(ExpFamBlock::inverse_gamma(pr.sigma_alpha, pr.sigma_beta)?);
        }
        // dof 2 scale_alpha + 1 with V^{-1} = 2 scale_beta I makes each C_kk
        // marginally InverseGamma(scale_alpha, scale_beta), as in the prior
        let dof = (2.0 * pr.scale_alpha + 1.0).max(4.0);
        let scale = DMatrix::from_diagonal_element(2, 2, 1.0 / (2.0 * pr.scale_beta));
        blocks.push(ExpFamBlock::wishart(dof, &scale)?);
        VarParams::from_blocks(&self.layout, blocks)
    }

    fn quantities(&self) -> Vec<Quantity> {
        let ix = self.idx;
        let mut q = vec![Quantity::new("mu", ix.global(0)), Quantity::new("tau", ix.global(1))];
        for k in 0..ix.k {
            q.push(Quantity::new(format!("mu_k[{k}]"), ix.site(k, 0)));
        }
        for k in 0..ix.k {
            q.push(Quantity::new(format!("tau_k[{k}]"), ix.site(k, 1)));
        }
        q
    }

    fn block_prior_log_density(&self, block: usize, point: &[f64], alpha: &[f64]) -> Result<f64> {
        let pr = MicrocreditPriors::from_slice(alpha)?;
        if block == 0 {
            // (mu, tau) ~ N(0, Lambda_prior^{-1}) is the only top-level factor
            let l = pr.lambda;
            let ld = (l[0][0] * l[1][1] - l[0][1] * l[1][0]).ln();
            let (x, y) = (point[0], point[1]);
            let quad = l[0][0] * x * x + 2.0 * l[0][1] * x * y + l[1][1] * y * y;
            return Ok(-LN_2PI + 0.5 * ld - 0.5 * quad);
        }
        let k = self.idx.k;
        if (k + 1..=2 * k).contains(&block) {
            let x = point[0];
            if !(x > 0.0) {
                return Ok(f64::NEG_INFINITY);
            }
            let (a, b) = (pr.sigma_alpha, pr.sigma_beta);
            return Ok(a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x);
        }
        if block >= self.layout.len() {
            return Err(Error::InvalidInput(format!("block index {block} out of range (have {})", self.layout.len())));
        }
        // site effects depend on (mu, tau, C); C's prior is not a product
        // with Lambda's variational factor in these coordinates
        Err(Error::NotFactorized(block))
    }

    fn fingerprint(&self) -> String {
        let mut v = Vec::new();
        for s in &self.data.sites {
            v.push(s.outcome.len() as f64);
            for (t, y) in s.treatment.iter().zip(&s.outcome) {
                v.push(if *t { 1.0 } else { 0.0 });
                v.push(*y);
            }
        }
        fingerprint_of(self.name(), &v)
    }

    fn posterior_target(&self) -> Option<&dyn PosteriorTarget> {
        Some(self)
    }
}

/// Sampler coordinates:
/// `(mu, tau, mu_1..mu_K, tau_1..tau_K, log sigma2_1..K, log C11, log C22, atanh r)`.
impl PosteriorTarget for Microcredit {
    fn coord_names(&self) -> Vec<String> {
        let k = self.idx.k;
        let mut n = vec!["mu".to_string(), "tau".to_string()];
        n.extend((0..k).map(|j| format!("mu_k[{j}]")));
        n.extend((0..k).map(|j| format!("tau_k[{j}]")));
        n.extend((0..k).map(|j| format!("log_sigma2[{j}]")));
        n.extend(["log_c11".to_string(), "log_c22".to_string(), "atanh_r".to_string()]);
        n
    }

    fn log_density(&self, x: &[f64], alpha: &[f64]) -> f64 {
        let Ok(pr) = MicrocreditPriors::from_slice(alpha) else {
            return f64::NEG_INFINITY;
        };
        let k = self.idx.k;
        let (mu, tau) = (x[0], x[1]);
        let (lc1, lc2, z) = (x[2 + 3 * k], x[3 + 3 * k], x[4 + 3 * k]);
        let r = z.tanh();
        let one_m_r2 = 1.0 - r * r;
        if !(one_m_r2 > 0.0) {
            return f64::NEG_INFINITY;
        }
        let (c1, c2) = (lc1.exp(), lc2.exp());
        let (s1, s2) = (c1.sqrt(), c2.sqrt());
        let det_c = c1 * c2 * one_m_r2;
        // C^{-1} entries
        let i11 = 1.0 / (c1 * one_m_r2);
        let i22 = 1.0 / (c2 * one_m_r2);
        let i12 = -r / (s1 * s2 * one_m_r2);
        let mut lp = 0.0;
        for (j, st) in self.stats.iter().enumerate() {
            let (mk, tk, ls) = (x[2 + j], x[2 + k + j], x[2 + 2 * k + j]);
            let inv = (-ls).exp();
            let sse = st.syy - 2.0 * mk * st.sy - 2.0 * tk * st.sty + st.n * mk * mk + 2.0 * st.n1 * mk * tk
                + st.n1 * tk * tk;
            lp += -0.5 * st.n * ls - 0.5 * inv * sse;
            let (d1, d2) = (mk - mu, tk - tau);
            lp += -0.5 * det_c.ln() - 0.5 * (i11 * d1 * d1 + 2.0 * i12 * d1 * d2 + i22 * d2 * d2);
            // sigma2 prior with the log-coordinate Jacobian
            lp += -(pr.sigma_alpha + 1.0) * ls - pr.sigma_beta * inv + ls;
        }
        let l = pr.lambda;
        lp += -0.5 * (l[0][0] * mu * mu + 2.0 * l[0][1] * mu * tau + l[1][1] * tau * tau);
        for lc in [lc1, lc2] {
            lp += -(pr.scale_alpha + 1.0) * lc - pr.scale_beta * (-lc).exp() + lc;
        }
        lp += (pr.lkj_eta - 1.0) * one_m_r2.ln() + one_m_r2.ln();
        lp
    }

    fn quantity_values(&self, x: &[f64]) -> Vec<f64> {
        x[..2 + 2 * self.idx.k].to_vec()
    }

    fn locate(&self, q: &VarParams) -> (Vec<f64>, Vec<f64>) {
        let k = self.idx.k;
        let mut center = vec![0.0; 3 * k + 5];
        let mut scale = vec![0.0; 3 * k + 5];
        let gaussian = |b: usize| q.block(b).gaussian_moments().expect("Gaussian block");
        let (m, c) = gaussian(0);
        center[0] = m[0];
        center[1] = m[1];
        scale[0] = c[(0, 0)].sqrt();
        scale[1] = c[(1, 1)].sqrt();
        for j in 0..k {
            let (m, c) = gaussian(1 + j);
            center[2 + j] = m[0];
            center[2 + k + j] = m[1];
            scale[2 + j] = c[(0, 0)].sqrt();
            scale[2 + k + j] = c[(1, 1)].sqrt();
            let (a, b) = q.block(1 + k + j).gamma_params().expect("inverse-gamma block");
            center[2 + 2 * k + j] = b.ln() - digamma(a);
            scale[2 + 2 * k + j] = trigamma(a).sqrt();
        }
        let p = q.block(self.idx.wishart_block()).wishart_params().expect("Wishart block");
        let shape = (p.dof - 1.0) / 2.0;
        for i in 0..2 {
            center[2 + 3 * k + i] = (0.5 * p.inv_scale[(i, i)]).ln() - digamma(shape);
            scale[2 + 3 * k + i] = trigamma(shape).sqrt();
        }
        let ec = &p.inv_scale / (p.dof - 3.0);
        let r = ec[(0, 1)] / (ec[(0, 0)] * ec[(1, 1)]).sqrt();
        center[4 + 3 * k] = r.clamp(-0.99, 0.99).atanh();
        scale[4 + 3 * k] = (1.0 / (p.dof - 3.0)).sqrt().max(0.05);
        (center, scale)
    }
}

/// Hierarchical model at the given priors.
pub fn build_microcredit_model(data: MicrocreditData, priors: &MicrocreditPriors) -> Result<ModelSpec> {
    priors.validate()?;
    ModelSpec::new(std::sync::Arc::new(Microcredit::new(data)?), priors.to_vec())
}
