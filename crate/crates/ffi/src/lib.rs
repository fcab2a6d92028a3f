//! C interface to `lrvb`.
//!
//! Models and fits are opaque heap handles owned by the caller and released
//! with the matching `*_free` function. Every fallible call returns an
//! `LrvbStatus`; on failure a message describing the last error on the
//! calling thread is available from `lrvb_last_error_message`. Panics never
//! cross the boundary; they surface as `LRVB_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use lrvb::lrvb::{build_system, LrvbSystem};
use lrvb::mfvb::{fit, FitOptions, ModelSpec, VbSolution};
use lrvb::models::{build_microcredit_model, MicrocreditData, MicrocreditPriors, NormalInverseGamma, NormalNormal, Site};
use lrvb::robustness::{hyperparam_sensitivity, influence_grid};
use lrvb::Error;

/// Outcome of a call. Values other than `Ok` match the library's error
/// kinds one to one, plus three that only arise at the boundary.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrvbStatus {
    Ok = 0,
    DomainError = 1,
    DimensionMismatch = 2,
    NonConvergence = 3,
    DomainViolation = 4,
    SingularSystem = 5,
    NonDifferentiablePrior = 6,
    QuadratureFailure = 7,
    ZeroPriorDensity = 8,
    NormalizationFailure = 9,
    NotConjugate = 10,
    DegenerateChain = 11,
    NotFactorized = 12,
    ZeroVariance = 13,
    UnknownHyperparameter = 14,
    InvalidInput = 15,
    IoError = 16,
    /// A required pointer argument was null.
    NullPointer = 100,
    /// An output buffer was shorter than required; nothing was written.
    BufferTooSmall = 101,
    Panic = 102,
}

impl From<&Error> for LrvbStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Domain(_) => LrvbStatus::DomainError,
            Error::DimensionMismatch { .. } => LrvbStatus::DimensionMismatch,
            Error::NonConvergence { .. } => LrvbStatus::NonConvergence,
            Error::DomainViolation(_) => LrvbStatus::DomainViolation,
            Error::SingularSystem { .. } => LrvbStatus::SingularSystem,
            Error::NonDifferentiablePrior(_) => LrvbStatus::NonDifferentiablePrior,
            Error::QuadratureFailure(_) => LrvbStatus::QuadratureFailure,
            Error::ZeroPriorDensity { .. } => LrvbStatus::ZeroPriorDensity,
            Error::NormalizationFailure(_) => LrvbStatus::NormalizationFailure,
            Error::NotConjugate(_) => LrvbStatus::NotConjugate,
            Error::DegenerateChain { .. } => LrvbStatus::DegenerateChain,
            Error::NotFactorized(_) => LrvbStatus::NotFactorized,
            Error::ZeroVariance(_) => LrvbStatus::ZeroVariance,
            Error::UnknownHyperparameter { .. } => LrvbStatus::UnknownHyperparameter,
            Error::InvalidInput(_) => LrvbStatus::InvalidInput,
            Error::Io(_) => LrvbStatus::IoError,
        }
    }
}

/// A model with its data and current hyperparameters.
pub struct LrvbModel {
    spec: ModelSpec,
}

/// A converged fit together with its linear response system. Holds its own
/// copy of the model, so later hyperparameter changes do not affect it.
pub struct LrvbFit {
    model: ModelSpec,
    sol: VbSolution,
    sys: LrvbSystem,
}

/// Scalar diagnostics of a fit.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LrvbFitSummary {
    pub elbo: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Condition number of `I - V H`.
    pub condition: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Short { needed: usize, got: usize },
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

type FfiResult<T> = std::result::Result<T, Fail>;

/// Runs `f`, translating errors and panics into a status and the
/// thread-local message.
fn guard<F>(f: F) -> LrvbStatus
where
    F: FnOnce() -> FfiResult<()>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            LrvbStatus::Ok
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(format!("{}: {e}", e.name()));
            LrvbStatus::from(&e)
        }
        Ok(Err(Fail::Null(arg))) => {
            set_error(format!("NullPointer: `{arg}` must not be null"));
            LrvbStatus::NullPointer
        }
        Ok(Err(Fail::Short { needed, got })) => {
            set_error(format!("BufferTooSmall: need {needed} elements, got {got}"));
            LrvbStatus::BufferTooSmall
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("Panic: {msg}"));
            LrvbStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, arg: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Fail::Null(arg));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, needed: usize, arg: &'static str) -> FfiResult<&'a mut [T]> {
    if len < needed {
        return Err(Fail::Short { needed, got: len });
    }
    if ptr.is_null() {
        return Err(Fail::Null(arg));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, needed))
}

unsafe fn text<'a>(ptr: *const c_char, arg: &'static str) -> FfiResult<&'a str> {
    if ptr.is_null() {
        return Err(Fail::Null(arg));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| Fail::Lib(Error::InvalidInput(format!("`{arg}` is not UTF-8"))))
}

unsafe fn model_ref<'a>(ptr: *const LrvbModel) -> FfiResult<&'a LrvbModel> {
    ptr.as_ref().ok_or(Fail::Null("model"))
}

unsafe fn fit_ref<'a>(ptr: *const LrvbFit) -> FfiResult<&'a LrvbFit> {
    ptr.as_ref().ok_or(Fail::Null("fit"))
}

unsafe fn emit_model(out: *mut *mut LrvbModel, spec: ModelSpec) -> FfiResult<()> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(LrvbModel { spec }));
    Ok(())
}

/// Normal observations with known noise variance and a normal prior on the
/// mean.
///
/// # Safety
/// `data` points to `n` doubles (may be null when `n == 0`); `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn lrvb_model_normal_normal(
    data: *const f64,
    n: usize,
    noise_var: f64,
    prior_mean: f64,
    prior_var: f64,
    out: *mut *mut LrvbModel,
) -> LrvbStatus {
    guard(|| {
        let x = slice(data, n, "data")?.to_vec();
        if !(prior_var > 0.0 && prior_var.is_finite()) {
            return Err(Error::InvalidInput("prior_var must be positive".into()).into());
        }
        let joint = NormalNormal::new(x, noise_var)?;
        emit_model(out, ModelSpec::new(Arc::new(joint), NormalNormal::prior_from_moments(prior_mean, prior_var))?)
    })
}

/// Normal observations with a normal-inverse-gamma prior, hyperparameters
/// `mu0 = 0, kappa0 = 1, a0 = 2, b0 = 1`.
///
/// # Safety
/// `data` points to `n` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lrvb_model_normal_inverse_gamma(data: *const f64, n: usize, out: *mut *mut LrvbModel) -> LrvbStatus {
    guard(|| {
        let joint = NormalInverseGamma::new(slice(data, n, "data")?.to_vec())?;
        emit_model(out, ModelSpec::new(Arc::new(joint), vec![0.0, 1.0, 2.0, 1.0])?)
    })
}

/// Hierarchical treatment-effect model at the default priors. Row `i` has
/// site index `site[i]`, treatment flag `treatment[i]` (0 or 1) and outcome
/// `outcome[i]`; site indices must cover `0..K` with `K >= 2`.
///
/// # Safety
/// The three arrays hold `n` elements each; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lrvb_model_microcredit(
    site: *const u32,
    treatment: *const u8,
    outcome: *const f64,
    n: usize,
    out: *mut *mut LrvbModel,
) -> LrvbStatus {
    guard(|| {
        let site = slice(site, n, "site")?;
        let treatment = slice(treatment, n, "treatment")?;
        let outcome = slice(outcome, n, "outcome")?;
        let k = site.iter().max().map_or(0, |m| *m as usize + 1);
        let mut sites: Vec<Site> = (0..k).map(|_| Site { treatment: Vec::new(), outcome: Vec::new() }).collect();
        for i in 0..n {
            let t = match treatment[i] {
                0 => false,
                1 => true,
                other => return Err(Error::InvalidInput(format!("row {i}: treatment must be 0 or 1, got {other}")).into()),
            };
            let s = &mut sites[site[i] as usize];
            s.treatment.push(t);
            s.outcome.push(outcome[i]);
        }
        let data = MicrocreditData::new(sites)?;
        emit_model(out, build_microcredit_model(data, &MicrocreditPriors::default())?)
    })
}

/// Same model read from a `site,treatment,outcome` CSV file.
///
/// # Safety
/// `path` is a NUL-terminated UTF-8 string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lrvb_model_microcredit_csv(path: *const c_char, out: *mut *mut LrvbModel) -> LrvbStatus {
    guard(|| {
        let data = MicrocreditData::from_csv(text(path, "path")?)?;
        emit_model(out, build_microcredit_model(data, &MicrocreditPriors::default())?)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` came from a `lrvb_model_*` constructor and is not used again.
#[no_mangle]
pub unsafe extern "C" fn lrvb_model_free(model: *mut LrvbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Sets one hyperparameter by name, validating the full set.
///
/// # Safety
/// `model` is a live handle; `name` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lrvb_model_set_hyperparameter(model: *mut LrvbModel, name: *const c_char, value: f64) -> LrvbStatus {
    guard(|| {
        let m = model.as_mut().ok_or(Fail::Null("model"))?;
        let i = m.spec.hyper_index(text(name, "name")?)?;
        let mut alpha = m.spec.hyperparams().to_vec();
        alpha[i] = value;
        m.spec = m.spec.with_hyperparams(alpha)?;
        Ok(())
    })
}

/// Reads one hyperparameter by name.
///
/// # Safety
/// `model` is a live handle; `name` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lrvb_model_hyperparameter(model: *const LrvbModel, name: *const c_char, out: *mut f64) -> LrvbStatus {
    guard(|| {
        let m = model_ref(model)?;
        let i = m.spec.hyper_index(text(name, "name")?)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = m.spec.hyperparams()[i];
        Ok(())
    })
}

/// Number of tracked scalar quantities.
///
/// # Safety
/// `model` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lrvb_model_num_quantities(model: *const LrvbModel, out: *mut usize) -> LrvbStatus {
    guard(|| {
        *out.as_mut().ok_or(Fail::Null("out"))? = model_ref(model)?.spec.quantities().len();
        Ok(())
    })
}

/// Copies the name of quantity `index` as a NUL-terminated string. The
/// required size including the terminator is stored in `needed` (if
/// non-null) whether or not `buf` is large enough.
///
/// # Safety
/// `model` is a live handle; `buf` holds `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn lrvb_model_quantity_name(
    model: *const LrvbModel,
    index: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> LrvbStatus {
    guard(|| {
        let qs = model_ref(model)?.spec.quantities();
        let q = qs
            .get(index)
            .ok_or_else(|| Error::InvalidInput(format!("quantity index {index} out of range (have {})", qs.len())))?;
        let bytes = q.name.as_bytes();
        if let Some(n) = needed.as_mut() {
            *n = bytes.len() + 1;
        }
        let dst = slice_mut(buf, len, bytes.len() + 1, "buf")?;
        for (d, s) in dst.iter_mut().zip(bytes) {
            *d = *s as c_char;
        }
        dst[bytes.len()] = 0;
        Ok(())
    })
}

/// Fits the mean-field approximation and builds the linear response
/// system. `tol <= 0` and `max_iter == 0` select the defaults.
///
/// # Safety
/// `model` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lrvb_fit(model: *const LrvbModel, tol: f64, max_iter: usize, out: *mut *mut LrvbFit) -> LrvbStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let d = FitOptions::default();
        let opts = FitOptions { tol: if tol > 0.0 { tol } else { d.tol }, max_iter: if max_iter > 0 { max_iter } else { d.max_iter } };
        let sol = fit(&m.spec, None, &opts)?;
        let sys = build_system(&m.spec, &sol)?;
        *out = Box::into_raw(Box::new(LrvbFit { model: m.spec.clone(), sol, sys }));
        Ok(())
    })
}

/// Releases a fit. Null is ignored.
///
/// # Safety
/// `fit` came from `lrvb_fit` and is not used again.
#[no_mangle]
pub unsafe extern "C" fn lrvb_fit_free(fit: *mut LrvbFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// # Safety
/// `fit` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lrvb_fit_summary(fit: *const LrvbFit, out: *mut LrvbFitSummary) -> LrvbStatus {
    guard(|| {
        let f = fit_ref(fit)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = LrvbFitSummary {
            elbo: f.sol.elbo,
            grad_norm: f.sol.grad_norm,
            iterations: f.sol.iterations,
            condition: f.sys.condition,
        };
        Ok(())
    })
}

/// Posterior means and mean-field and linear-response standard deviations
/// of every quantity, in model order. Any output pointer may be null to
/// skip it; non-null ones must hold `len >= number of quantities`.
///
/// # Safety
/// `fit` is a live handle; each non-null array holds `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lrvb_fit_quantities(
    fit: *const LrvbFit,
    means: *mut f64,
    vb_sds: *mut f64,
    lrvb_sds: *mut f64,
    len: usize,
) -> LrvbStatus {
    guard(|| {
        let f = fit_ref(fit)?;
        let qs = f.model.quantities();
        let n = qs.len();
        if len < n {
            return Err(Fail::Short { needed: n, got: len });
        }
        for (i, q) in qs.iter().enumerate() {
            let j = q.index;
            if !means.is_null() {
                *means.add(i) = f.sol.mean[j];
            }
            if !vb_sds.is_null() {
                *vb_sds.add(i) = f.sys.v[(j, j)].max(0.0).sqrt();
            }
            if !lrvb_sds.is_null() {
                *lrvb_sds.add(i) = f.sys.sigma_hat[(j, j)].max(0.0).sqrt();
            }
        }
        Ok(())
    })
}

/// Derivative of each quantity's posterior mean with respect to one
/// hyperparameter.
///
/// # Safety
/// `fit` is a live handle; `name` is NUL-terminated; `out` holds `len`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn lrvb_fit_sensitivity(fit: *const LrvbFit, name: *const c_char, out: *mut f64, len: usize) -> LrvbStatus {
    guard(|| {
        let f = fit_ref(fit)?;
        let d = f.model.hyper_direction(text(name, "name")?)?;
        let qs = f.model.quantities();
        let dst = slice_mut(out, len, qs.len(), "out")?;
        let resp = hyperparam_sensitivity(&f.model, &f.sol, &f.sys, &d)?;
        for (o, q) in dst.iter_mut().zip(&qs) {
            *o = resp[q.index];
        }
        Ok(())
    })
}

/// Influence of a point mass in the prior of `block` on the posterior mean
/// of quantity `quantity`, at `n_points` points of dimension `point_dim`
/// stored row by row.
///
/// # Safety
/// `fit` is a live handle; `points` holds `n_points * point_dim` doubles;
/// `out` holds `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lrvb_fit_influence(
    fit: *const LrvbFit,
    block: usize,
    quantity: usize,
    points: *const f64,
    n_points: usize,
    point_dim: usize,
    out: *mut f64,
    len: usize,
) -> LrvbStatus {
    guard(|| {
        let f = fit_ref(fit)?;
        let qs = f.model.quantities();
        let q = qs
            .get(quantity)
            .ok_or_else(|| Error::InvalidInput(format!("quantity index {quantity} out of range (have {})", qs.len())))?;
        let total = n_points.checked_mul(point_dim).ok_or_else(|| Error::InvalidInput("point array too large".into()))?;
        let flat = slice(points, total, "points")?;
        let pts: Vec<Vec<f64>> = flat.chunks(point_dim.max(1)).map(|c| c.to_vec()).collect();
        let dst = slice_mut(out, len, n_points, "out")?;
        let vals = influence_grid(&f.model, &f.sol, &f.sys, block, &pts, &q.gradient(f.model.dim()))?;
        dst.copy_from_slice(&vals);
        Ok(())
    })
}

/// Copies the message of the last failed call on this thread into `buf`
/// (truncated, always NUL-terminated when `len > 0`) and returns the full
/// message length plus one. Returns 1 (an empty message) after a success.
///
/// # Safety
/// `buf` holds `len` bytes or is null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn lrvb_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            for (i, b) in bytes[..n].iter().enumerate() {
                *buf.add(i) = *b as c_char;
            }
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Static NUL-terminated name of a status code.
#[no_mangle]
pub extern "C" fn lrvb_status_name(status: LrvbStatus) -> *const c_char {
    let s: &'static CStr = match status {
        LrvbStatus::Ok => c"Ok",
        LrvbStatus::DomainError => c"DomainError",
        LrvbStatus::DimensionMismatch => c"DimensionMismatch",
        LrvbStatus::NonConvergence => c"NonConvergence",
        LrvbStatus::DomainViolation => c"DomainViolation",
        LrvbStatus::SingularSystem => c"SingularSystem",
        LrvbStatus::NonDifferentiablePrior => c"NonDifferentiablePrior",
        LrvbStatus::QuadratureFailure => c"QuadratureFailure",
        LrvbStatus::ZeroPriorDensity => c"ZeroPriorDensity",
        LrvbStatus::NormalizationFailure => c"NormalizationFailure",
        LrvbStatus::NotConjugate => c"NotConjugate",
        LrvbStatus::DegenerateChain => c"DegenerateChain",
        LrvbStatus::NotFactorized => c"NotFactorized",
        LrvbStatus::ZeroVariance => c"ZeroVariance",
        LrvbStatus::UnknownHyperparameter => c"UnknownHyperparameter",
        LrvbStatus::InvalidInput => c"InvalidInput",
        LrvbStatus::IoError => c"IoError",
        LrvbStatus::NullPointer => c"NullPointer",
        LrvbStatus::BufferTooSmall => c"BufferTooSmall",
        LrvbStatus::Panic => c"Panic",
    };
    s.as_ptr()
}
