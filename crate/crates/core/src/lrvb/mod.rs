//! Linear response correction: `Sigma_hat = (I - V H)^{-1} V`.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};
use crate::mfvb::{ModelSpec, VbSolution};

/// Largest condition number of `I - V H` accepted as non-singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Relative asymmetry of the raw solve above which a warning is logged.
pub const ASYMMETRY_WARN: f64 = 1e-6;

/// `V`, `H`, the corrected covariance, and factorizations of `I - V H` and
/// its transpose for repeated solves. Immutable once built.
#[derive(Debug, Clone)]
pub struct LrvbSystem {
    pub v: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub sigma_hat: DMatrix<f64>,
    /// Condition number of `I - V H` (2-norm).
    pub condition: f64,
    /// `max |S - S^T| / max |S|` of the raw solve before symmetrizing.
    pub asymmetry: f64,
    lu: LU<f64, Dyn, Dyn>,
    lu_t: LU<f64, Dyn, Dyn>,
}

impl LrvbSystem {
    pub fn from_parts(v: DMatrix<f64>, h: DMatrix<f64>) -> Result<Self> {
        let n = v.nrows();
        if v.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: v.ncols() });
        }
        if h.nrows() != n || h.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: h.nrows() });
        }
        let a = DMatrix::identity(n, n) - &v * &h;
        let sv = a.clone().singular_values();
        let (smax, smin) = (sv.max(), sv.min());
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::SingularSystem { condition });
        }
        let lu_t = a.transpose().lu();
        let lu = a.lu();
        let raw = lu.solve(&v).ok_or(Error::SingularSystem { condition })?;
        let scale = raw.amax().max(f64::MIN_POSITIVE);
        let asymmetry = (&raw - raw.transpose()).amax() / scale;
        if asymmetry > ASYMMETRY_WARN {
            log::warn!("linear response covariance asymmetric before symmetrizing: {asymmetry:e}");
        }
        let sigma_hat = crate::linalg::symmetrize(&raw);
        Ok(Self { v, h, sigma_hat, condition, asymmetry, lu, lu_t })
    }

    pub fn dim(&self) -> usize {
        self.v.nrows()
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    /// `(I - V H)^{-1} rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(rhs)?;
        self.lu.solve(rhs).ok_or(Error::SingularSystem { condition: self.condition })
    }

    /// `(I - V H)^{-T} rhs`.
    pub fn solve_transpose(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(rhs)?;
        self.lu_t.solve(rhs).ok_or(Error::SingularSystem { condition: self.condition })
    }

    /// `Sigma_hat x`.
    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        Ok(&self.sigma_hat * x)
    }

    /// Corrected variance of the linear quantity with gradient `grad_h`.
    pub fn variance(&self, grad_h: &DVector<f64>) -> Result<f64> {
        function_sensitivity(self, grad_h, grad_h)
    }
}

/// Assembles `V` from the fitted blocks and `H` from the model, both in
/// mean-parameter coordinates, at a converged solution.
pub fn build_system(model: &ModelSpec, sol: &VbSolution) -> Result<LrvbSystem> {
    if !sol.converged {
        return Err(Error::InvalidInput("linear response needs a converged solution".into()));
    }
    let v = sol.params.covariance()?;
    let h = model.hessian(&sol.params)?;
    LrvbSystem::from_parts(v, h)
}

/// `grad_h^T Sigma_hat grad_f`.
pub fn function_sensitivity(sys: &LrvbSystem, grad_h: &DVector<f64>, grad_f: &DVector<f64>) -> Result<f64> {
    sys.check(grad_h)?;
    sys.check(grad_f)?;
    Ok(grad_h.dot(&(&sys.sigma_hat * grad_f)))
}
