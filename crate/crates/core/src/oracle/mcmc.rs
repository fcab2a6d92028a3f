//! Seeded random-walk Metropolis-within-Gibbs sampler.
//!
//! Each sweep proposes `x_j + s_j z` for every coordinate in turn. During
//! burn-in the step scales adapt toward an acceptance rate of 0.44 with a
//! decaying Robbins-Monro gain; afterwards they are frozen, so the retained
//! draws come from a fixed, reversible kernel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TARGET_ACCEPT: f64 = 0.44;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    /// Total sweeps, burn-in included.
    pub chain_length: usize,
    pub burn_in: usize,
    /// Initial proposal scale per coordinate.
    pub step_scales: Vec<f64>,
    pub seed: u64,
}

impl McmcConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.chain_length <= self.burn_in {
            return Err(Error::InvalidInput("chain_length must exceed burn_in".into()));
        }
        if self.step_scales.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: self.step_scales.len() });
        }
        if self.step_scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput("step scales must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McmcResult {
    pub dim: usize,
    /// Retained draws, row-major (`draws[i * dim + j]`).
    #[serde(skip)]
    pub draws: Vec<f64>,
    pub means: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub ess: Vec<f64>,
    pub acceptance_rate: f64,
    pub final_step_scales: Vec<f64>,
}

impl McmcResult {
    pub fn len(&self) -> usize {
        self.draws.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn draw(&self, i: usize) -> &[f64] {
        &self.draws[i * self.dim..(i + 1) * self.dim]
    }

    /// Means and ESS-based standard errors of `f` over the retained draws.
    pub fn summarize<F>(&self, f: F) -> (Vec<f64>, Vec<f64>)
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let n = self.len();
        let series: Vec<Vec<f64>> = (0..n).map(|i| f(self.draw(i))).collect();
        let m = series.first().map_or(0, |s| s.len());
        let mut means = Vec::with_capacity(m);
        let mut ses = Vec::with_capacity(m);
        for j in 0..m {
            let col: Vec<f64> = series.iter().map(|s| s[j]).collect();
            let (mean, se, _) = mean_se_ess(&col);
            means.push(mean);
            ses.push(se);
        }
        (means, ses)
    }
}

/// Normalized autocorrelation via zero-padded FFT.
pub fn autocorrelation(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    buf.resize(size, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let c0 = buf[0].re;
    if !(c0 > 0.0) {
        let mut r = vec![0.0; n];
        r[0] = 1.0;
        return r;
    }
    buf[..n].iter().map(|c| c.re / c0).collect()
}

/// Effective sample size by Geyer's initial monotone positive sequence.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let rho = autocorrelation(x);
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < n {
        let gamma = rho[2 * m] + rho[2 * m + 1];
        if gamma <= 0.0 {
            break;
        }
        let g = gamma.min(prev);
        tau += 2.0 * g;
        prev = g;
        m += 1;
    }
    let tau = tau.max(1.0 / n as f64);
    n as f64 / tau
}

/// Mean, standard error and effective sample size of a scalar series.
pub fn mean_se_ess(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let ess = effective_sample_size(x);
    (mean, (var / ess).sqrt(), ess)
}

/// Runs the sampler from `init`. Fails with `DegenerateChain` when the
/// post-burn-in acceptance rate is below 1% or above 99%.
pub fn metropolis_sample<F>(log_target: F, init: &[f64], config: &McmcConfig) -> Result<McmcResult>
where
    F: Fn(&[f64]) -> f64,
{
    let d = init.len();
    config.validate(d)?;
    let mut x = init.to_vec();
    let mut lp = log_target(&x);
    if !lp.is_finite() {
        return Err(Error::InvalidInput(format!("log target is not finite at the initial point ({lp})")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut log_scale: Vec<f64> = config.step_scales.iter().map(|s| s.ln()).collect();
    let kept = config.chain_length - config.burn_in;
    let mut draws = Vec::with_capacity(kept * d);
    let mut accepted = 0usize;
    let mut proposed = 0usize;
    for sweep in 0..config.chain_length {
        let adapting = sweep < config.burn_in;
        let gain = (sweep as f64 + 1.0).powf(-0.6);
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.random();
            let old = x[j];
            x[j] = old + log_scale[j].exp() * z;
            let lp_new = log_target(&x);
            let accept = lp_new.is_finite() && u.ln() < lp_new - lp;
            if accept {
                lp = lp_new;
            } else {
                x[j] = old;
            }
            if adapting {
                let a = if accept { 1.0 } else { 0.0 };
                log_scale[j] += gain * (a - TARGET_ACCEPT);
            } else {
                proposed += 1;
                accepted += accept as usize;
            }
        }
        if !adapting {
            draws.extend_from_slice(&x);
        }
    }
    let rate = accepted as f64 / proposed.max(1) as f64;
    if !(0.01..=0.99).contains(&rate) {
        return Err(Error::DegenerateChain { rate });
    }
    let mut res = McmcResult {
        dim: d,
        draws,
        means: Vec::new(),
        std_errors: Vec::new(),
        ess: Vec::new(),
        acceptance_rate: rate,
        final_step_scales: log_scale.iter().map(|l| l.exp()).collect(),
    };
    for j in 0..d {
        let col: Vec<f64> = (0..kept).map(|i| res.draws[i * d + j]).collect();
        let (m, se, ess) = mean_se_ess(&col);
        res.means.push(m);
        res.std_errors.push(se);
        res.ess.push(ess);
    }
    Ok(res)
}
