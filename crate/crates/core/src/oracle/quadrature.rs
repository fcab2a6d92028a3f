//! Adaptive Gauss-Kronrod (10/21 point) integration of vector-valued
//! integrands over finite intervals, the real line, and the positive
//! half-line. Unbounded domains are mapped onto bounded ones:
//!
//! * real line: `x = c + s t / (1 - t^2)`, `t in (-1, 1)`
//! * half-line: `x = s t / (1 - t)`, `t in [0, 1)`
//!
//! Subintervals are refined worst-first until the summed error estimate
//! meets `max(abs_tol, rel_tol * |value|)`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::Serialize;

use crate::error::{Error, Result};

const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689,
    0.973_906_528_517_171_720_077_964_012_084,
    0.930_157_491_355_708_226_001_207_180_060,
    0.865_063_366_688_984_510_732_096_688_423,
    0.780_817_726_586_416_897_063_717_578_345,
    0.679_409_568_299_024_406_234_327_365_115,
    0.562_757_134_668_604_683_339_000_099_273,
    0.433_395_394_129_247_190_799_265_943_166,
    0.294_392_862_701_460_198_131_126_603_104,
    0.148_874_338_981_631_210_884_826_001_130,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062,
    0.032_558_162_307_964_727_478_818_972_459,
    0.054_755_896_574_351_996_031_381_300_245,
    0.075_039_674_810_919_952_767_043_140_916,
    0.093_125_454_583_697_605_535_065_465_083,
    0.109_387_158_802_297_641_899_210_590_326,
    0.123_491_976_262_065_851_077_600_525_638,
    0.134_709_217_311_473_325_928_054_001_772,
    0.142_775_938_577_060_080_797_094_273_139,
    0.147_739_104_901_338_491_374_841_515_972,
    0.149_445_554_002_916_905_664_936_468_390,
];

// Gauss weights for the nodes XGK[1], XGK[3], ..., XGK[9].
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893,
    0.149_451_349_150_580_593_145_776_339_658,
    0.219_086_362_515_982_043_995_534_934_228,
    0.269_266_719_309_996_355_091_226_921_569,
    0.295_524_224_714_752_870_173_892_994_651,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Domain {
    Finite { lo: f64, hi: f64 },
    /// Whole real line, transformed around `center` with length `scale`.
    Real { center: f64, scale: f64 },
    /// `(0, inf)`, transformed with length `scale`.
    Positive { scale: f64 },
}

impl Domain {
    fn bounds(&self) -> (f64, f64) {
        match *self {
            Domain::Finite { lo, hi } => (lo, hi),
            Domain::Real { .. } => (-1.0, 1.0),
            Domain::Positive { .. } => (0.0, 1.0),
        }
    }

    /// Point and Jacobian for transformed coordinate `t`.
    fn map(&self, t: f64) -> (f64, f64) {
        match *self {
            Domain::Finite { .. } => (t, 1.0),
            Domain::Real { center, scale } => {
                let d = 1.0 - t * t;
                (center + scale * t / d, scale * (1.0 + t * t) / (d * d))
            }
            Domain::Positive { scale } => {
                let d = 1.0 - t;
                (scale * t / d, scale / (d * d))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Domain::Finite { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            Domain::Real { center, scale } => center.is_finite() && scale > 0.0 && scale.is_finite(),
            Domain::Positive { scale } => scale > 0.0 && scale.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid integration domain {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
    /// Number of equal pieces the transformed interval starts with.
    pub initial_pieces: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self { abs_tol: 1e-8, rel_tol: 1e-10, max_intervals: 4000, initial_pieces: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadResult {
    pub value: Vec<f64>,
    /// Summed Kronrod-minus-Gauss error estimate, max over components.
    pub error: f64,
    pub evaluations: usize,
}

impl QuadResult {
    pub fn scalar(&self) -> f64 {
        self.value[0]
    }
}

struct Piece {
    lo: f64,
    hi: f64,
    value: Vec<f64>,
    err: Vec<f64>,
    worst: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.worst == other.worst
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.worst.total_cmp(&other.worst)
    }
}

fn gk21<F>(f: &mut F, dom: &Domain, lo: f64, hi: f64, n: usize, buf: &mut [f64], evals: &mut usize) -> Result<Piece>
where
    F: FnMut(f64, &mut [f64]),
{
    let c = 0.5 * (lo + hi);
    let h = 0.5 * (hi - lo);
    let mut k = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut eval = |t: f64, buf: &mut [f64]| -> Result<()> {
        let (x, jac) = dom.map(t);
        buf.iter_mut().for_each(|v| *v = 0.0);
        f(x, buf);
        *evals += 1;
        for v in buf.iter_mut() {
            *v *= jac;
            if !v.is_finite() {
                // an exactly-zero integrand times an overflowing Jacobian at the
                // far end of an unbounded domain contributes nothing
                if jac.is_infinite() || x.is_infinite() {
                    *v = 0.0;
                } else {
                    return Err(Error::QuadratureFailure(format!("integrand is not finite at x = {x}")));
                }
            }
        }
        Ok(())
    };
    for (i, (&x, &w)) in XGK.iter().zip(&WGK).enumerate() {
        let pts: &[f64] = if x == 0.0 { &[0.0] } else { &[-1.0, 1.0] };
        for &sgn in pts {
            eval(c + sgn * h * x, buf)?;
            for j in 0..n {
                k[j] += w * buf[j];
                if i % 2 == 1 {
                    g[j] += WG[i / 2] * buf[j];
                }
            }
        }
    }
    let value: Vec<f64> = k.iter().map(|v| v * h).collect();
    let err: Vec<f64> = k.iter().zip(&g).map(|(k, g)| ((k - g) * h).abs()).collect();
    let worst = err.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(Piece { lo, hi, value, err, worst })
}

/// Integrates the `n`-vector valued `f` over `domain`; `f` writes its value
/// into the supplied buffer.
pub fn integrate_vec<F>(mut f: F, n: usize, domain: Domain, opts: &QuadOptions) -> Result<QuadResult>
where
    F: FnMut(f64, &mut [f64]),
{
    domain.validate()?;
    let (lo, hi) = domain.bounds();
    let mut buf = vec![0.0; n];
    let mut evals = 0;
    let mut heap = BinaryHeap::new();
    let pieces = opts.initial_pieces.max(1);
    let w = (hi - lo) / pieces as f64;
    for i in 0..pieces {
        let a = lo + w * i as f64;
        let b = if i + 1 == pieces { hi } else { a + w };
        heap.push(gk21(&mut f, &domain, a, b, n, &mut buf, &mut evals)?);
    }
    loop {
        let mut value = vec![0.0; n];
        let mut err = vec![0.0; n];
        for p in heap.iter() {
            for j in 0..n {
                value[j] += p.value[j];
                err[j] += p.err[j];
            }
        }
        let vmax = value.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let emax = err.iter().fold(0.0f64, |a, &b| a.max(b));
        let target = opts.abs_tol.max(opts.rel_tol * vmax);
        if emax <= target {
            return Ok(QuadResult { value, error: emax, evaluations: evals });
        }
        if heap.len() >= opts.max_intervals {
            return Err(Error::QuadratureFailure(format!(
                "error estimate {emax:e} above target {target:e} after {} subintervals",
                heap.len()
            )));
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.lo + worst.hi);
        if !(mid > worst.lo && mid < worst.hi) {
            return Err(Error::QuadratureFailure(format!("subinterval underflow near t = {mid}")));
        }
        heap.push(gk21(&mut f, &domain, worst.lo, mid, n, &mut buf, &mut evals)?);
        heap.push(gk21(&mut f, &domain, mid, worst.hi, n, &mut buf, &mut evals)?);
    }
}

pub fn integrate<F>(mut f: F, domain: Domain, opts: &QuadOptions) -> Result<QuadResult>
where
    F: FnMut(f64) -> f64,
{
    integrate_vec(|x, out: &mut [f64]| out[0] = f(x), 1, domain, opts)
}

/// Iterated integral over a product domain; the inner integral is solved to
/// a tenth of the outer tolerance.
pub fn integrate_2d<F>(f: F, n: usize, dx: Domain, dy: Domain, opts: &QuadOptions) -> Result<QuadResult>
where
    F: Fn(f64, f64, &mut [f64]),
{
    let inner = QuadOptions { abs_tol: opts.abs_tol * 0.1, rel_tol: opts.rel_tol * 0.1, ..*opts };
    let mut failure = None;
    let mut inner_err = 0.0f64;
    let mut evals = 0;
    let outer = integrate_vec(
        |x, out: &mut [f64]| {
            if failure.is_some() {
                return;
            }
            match integrate_vec(|y, o: &mut [f64]| f(x, y, o), n, dy, &inner) {
                Ok(r) => {
                    out.copy_from_slice(&r.value);
                    inner_err = inner_err.max(r.error);
                    evals += r.evaluations;
                }
                Err(e) => failure = Some(e),
            }
        },
        n,
        dx,
        opts,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let mut r = outer?;
    r.error += inner_err;
    r.evaluations = evals;
    Ok(r)
}

/// `integral of integrand(x) * density(x) dx` over `domain`.
pub fn quadrature_expectation<D, G>(density: D, integrand: G, domain: Domain, opts: &QuadOptions) -> Result<QuadResult>
where
    D: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    integrate(|x| integrand(x) * density(x), domain, opts)
}
