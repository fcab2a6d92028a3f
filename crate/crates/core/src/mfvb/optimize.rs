//! ELBO maximization in unconstrained coordinates.
//!
//! BFGS with Armijo backtracking does the bulk of the work. Once the line
//! search can no longer resolve a decrease (the ELBO change is at roundoff
//! level) a damped Newton polish with a finite-difference Hessian drives the
//! gradient the rest of the way down.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{ModelSpec, VarParams};
use crate::error::{Error, Result};
use crate::expfam::ExpFamBlock;

/// Relative ELBO slack within which an accepted step still counts as
/// non-decreasing. Evaluating the ELBO of a few hundred terms carries about
/// this much cancellation error, so nothing finer is observable.
pub const ELBO_ROUNDOFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitOptions {
    /// Euclidean norm of the ELBO gradient in unconstrained coordinates.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 10_000 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VbSolution {
    #[serde(skip)]
    pub params: VarParams,
    pub mean: DVector<f64>,
    pub elbo: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    /// ELBO after the initial point and after every accepted step.
    pub elbo_trace: Vec<f64>,
}

impl VbSolution {
    pub fn elbo_non_decreasing(&self) -> bool {
        self.elbo_trace.windows(2).all(|w| w[1] >= w[0] - ELBO_ROUNDOFF * (1.0 + w[0].abs()))
    }
}

struct Eval {
    u: DVector<f64>,
    q: VarParams,
    elbo: f64,
    /// Gradient of the negative ELBO in `u`.
    grad: DVector<f64>,
}

fn evaluate(model: &ModelSpec, u: &DVector<f64>) -> Result<Eval> {
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("non-finite unconstrained coordinate".into()));
    }
    let layout = model.layout();
    let mut blocks = Vec::with_capacity(layout.len());
    let mut jacs = Vec::with_capacity(layout.len());
    for b in layout.blocks() {
        let (eta, jac) = b.family.natural_from_unconstrained(&u.as_slice()[b.range()]);
        blocks.push(ExpFamBlock::from_natural(b.family, &eta)?);
        jacs.push(jac);
    }
    let q = VarParams::from_blocks(layout, blocks)?;
    let elbo = model.elbo_at(&q)?;
    let gm = model.gradient(&q)? - q.natural();
    let mut grad = DVector::zeros(u.len());
    for ((b, blk), jac) in layout.blocks().iter().zip(q.blocks()).zip(&jacs) {
        let r = b.range();
        let v = blk.suff_stat_covariance()?;
        let g_eta = v * gm.rows(r.start, r.len());
        grad.rows_mut(r.start, r.len()).copy_from(&(-(jac.transpose() * g_eta)));
    }
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("non-finite ELBO gradient".into()));
    }
    Ok(Eval { u: u.clone(), q, elbo, grad })
}

fn slack(f: f64) -> f64 {
    ELBO_ROUNDOFF * (1.0 + f.abs())
}

/// Largest allowed step in any unconstrained coordinate; keeps log-scale
/// parameters from jumping into overflow on the first iterations.
const MAX_STEP: f64 = 5.0;

fn cap(p: DVector<f64>) -> DVector<f64> {
    let big = p.amax();
    if big > MAX_STEP {
        p * (MAX_STEP / big)
    } else {
        p
    }
}

enum Line {
    Accepted(Eval),
    Stalled,
}

/// Armijo backtracking on the negative ELBO; out-of-domain trial points
/// count as failures and shrink the step.
fn backtrack(model: &ModelSpec, cur: &Eval, p: &DVector<f64>, allow: f64) -> Line {
    let slope = cur.grad.dot(p);
    let f0 = -cur.elbo;
    let mut t = 1.0;
    for _ in 0..60 {
        let trial = &cur.u + p * t;
        if let Ok(ev) = evaluate(model, &trial) {
            let f = -ev.elbo;
            if f <= f0 + 1e-4 * t * slope || (allow > 0.0 && f <= f0 + allow && ev.grad.norm() < cur.grad.norm()) {
                return Line::Accepted(ev);
            }
        }
        t *= 0.5;
    }
    Line::Stalled
}

fn fd_hessian_u(model: &ModelSpec, cur: &Eval) -> Result<DMatrix<f64>> {
    let n = cur.u.len();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let step = 1e-6 * cur.u[j].abs().max(1.0);
        let mut up = cur.u.clone();
        up[j] += step;
        let mut um = cur.u.clone();
        um[j] -= step;
        let gp = evaluate(model, &up)?.grad;
        let gm = evaluate(model, &um)?.grad;
        h.set_column(j, &((gp - gm) / (2.0 * step)));
    }
    Ok(crate::linalg::symmetrize(&h))
}

/// Newton direction for the negative ELBO, with Levenberg damping until
/// the shifted Hessian is positive definite.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let n = g.len();
    let scale = h.diagonal().amax().max(1e-12);
    let mut lambda = 0.0;
    loop {
        let shifted = h + DMatrix::identity(n, n) * lambda;
        if let Some(ch) = shifted.cholesky() {
            return -ch.solve(g);
        }
        lambda = if lambda == 0.0 { 1e-10 * scale } else { lambda * 10.0 };
        if lambda > 1e20 * scale {
            return -g.clone();
        }
    }
}

/// Maximizes the ELBO starting from `init` (mean parameters), or from the
/// model's prior-implied point when `init` is `None`.
pub fn fit(model: &ModelSpec, init: Option<&DVector<f64>>, opts: &FitOptions) -> Result<VbSolution> {
    let q0 = match init {
        Some(m) => VarParams::from_mean(model.layout(), m)?,
        None => model.initial_params()?,
    };
    let u0 = DVector::from_vec(q0.unconstrained()?);
    let mut cur = evaluate(model, &u0)?;
    let mut trace = vec![cur.elbo];
    let n = u0.len();
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut polishing = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let gnorm = cur.grad.norm();
        if gnorm <= opts.tol {
            return Ok(finish(cur, trace, iterations, true));
        }
        iterations += 1;

        if polishing {
            let h = fd_hessian_u(model, &cur)?;
            let p = newton_direction(&h, &cur.grad);
            match backtrack(model, &cur, &p, slack(cur.elbo)) {
                Line::Accepted(ev) => {
                    trace.push(ev.elbo);
                    cur = ev;
                }
                Line::Stalled => {
                    let g = cur.grad.norm();
                    return Err(Error::NonConvergence { iterations, grad_norm: g });
                }
            }
            continue;
        }

        let mut p = -&hinv * &cur.grad;
        if p.dot(&cur.grad) >= 0.0 {
            hinv = DMatrix::identity(n, n);
            fresh = true;
            p = -cur.grad.clone();
        }
        let p = cap(p);
        match backtrack(model, &cur, &p, 0.0) {
            Line::Accepted(ev) => {
                let s = &ev.u - &cur.u;
                let y = &ev.grad - &cur.grad;
                let sy = s.dot(&y);
                if sy > 1e-12 * s.norm() * y.norm() {
                    if fresh {
                        hinv *= sy / y.dot(&y);
                        fresh = false;
                    }
                    let rho = 1.0 / sy;
                    let hy = &hinv * &y;
                    let yhy = y.dot(&hy);
                    // H+ = H - rho (H y s^T + s y^T H) + (rho^2 y^T H y + rho) s s^T
                    hinv -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
                    hinv += &s * s.transpose() * (rho * rho * yhy + rho);
                }
                trace.push(ev.elbo);
                cur = ev;
            }
            Line::Stalled if !fresh => {
                hinv = DMatrix::identity(n, n);
                fresh = true;
            }
            Line::Stalled => {
                if cur.grad.norm() < 1e-2 {
                    polishing = true;
                } else {
                    return Err(Error::DomainViolation(format!(
                        "line search failed along the steepest-ascent direction (gradient norm {:e})",
                        cur.grad.norm()
                    )));
                }
            }
        }
        // Switch to Newton once BFGS has brought the gradient near roundoff.
        if !polishing && cur.grad.norm() < 1e-5 {
            polishing = true;
        }
    }
    let g = cur.grad.norm();
    if g <= opts.tol {
        return Ok(finish(cur, trace, iterations, true));
    }
    Err(Error::NonConvergence { iterations, grad_norm: g })
}

fn finish(cur: Eval, trace: Vec<f64>, iterations: usize, converged: bool) -> VbSolution {
    VbSolution {
        mean: cur.q.mean().clone(),
        params: cur.q,
        elbo: cur.elbo,
        iterations,
        converged,
        grad_norm: cur.grad.norm(),
        elbo_trace: trace,
    }
}
