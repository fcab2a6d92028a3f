use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use lrvb_ffi::*;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/microcredit_synthetic.csv")
}

fn last_error() -> String {
    let n = unsafe { lrvb_last_error_message(ptr::null_mut(), 0) };
    let mut buf = vec![0 as c_char; n];
    unsafe { lrvb_last_error_message(buf.as_mut_ptr(), n) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn normal_normal(data: &[f64], prior_mean: f64, prior_var: f64) -> *mut LrvbModel {
    let mut m = ptr::null_mut();
    let s = unsafe { lrvb_model_normal_normal(data.as_ptr(), data.len(), 1.0, prior_mean, prior_var, &mut m) };
    assert_eq!(s, LrvbStatus::Ok, "{}", last_error());
    m
}

fn fit(model: *const LrvbModel) -> *mut LrvbFit {
    let mut f = ptr::null_mut();
    let s = unsafe { lrvb_fit(model, 0.0, 0, &mut f) };
    assert_eq!(s, LrvbStatus::Ok, "{}", last_error());
    f
}

#[test]
fn conjugate_fit_reports_the_exact_posterior() {
    // N(0, 1) prior, four unit-variance observations averaging 1
    let m = normal_normal(&[0.5, 1.5, 0.0, 2.0], 0.0, 1.0);
    let f = fit(m);
    let (mut mean, mut vb, mut lr) = (0.0, 0.0, 0.0);
    assert_eq!(unsafe { lrvb_fit_quantities(f, &mut mean, &mut vb, &mut lr, 1) }, LrvbStatus::Ok);
    assert!((mean - 0.8).abs() < 1e-8);
    assert!((lr * lr - 0.2).abs() < 1e-8);
    assert!((vb - lr).abs() < 1e-8);

    // d E[theta] / d eta1 equals the posterior variance
    let mut sens = 0.0;
    let name = CString::new("prior_eta1").unwrap();
    assert_eq!(unsafe { lrvb_fit_sensitivity(f, name.as_ptr(), &mut sens, 1) }, LrvbStatus::Ok);
    assert!((sens - 0.2).abs() < 1e-8);

    let mut summary = LrvbFitSummary::default();
    assert_eq!(unsafe { lrvb_fit_summary(f, &mut summary) }, LrvbStatus::Ok);
    assert!(summary.grad_norm <= 1e-8 && summary.condition >= 1.0);
    unsafe {
        lrvb_fit_free(f);
        lrvb_model_free(m);
    }
}

#[test]
fn influence_vanishes_at_the_posterior_mean() {
    let m = normal_normal(&[0.3, 1.1, -0.2], 0.0, 4.0);
    let f = fit(m);
    let mut mean = 0.0;
    unsafe { lrvb_fit_quantities(f, &mut mean, ptr::null_mut(), ptr::null_mut(), 1) };
    let pts = [mean, mean + 1.0, mean - 1.0];
    let mut out = [f64::NAN; 3];
    let s = unsafe { lrvb_fit_influence(f, 0, 0, pts.as_ptr(), 3, 1, out.as_mut_ptr(), 3) };
    assert_eq!(s, LrvbStatus::Ok, "{}", last_error());
    assert_eq!(out[0], 0.0);
    assert!(out[1] > 0.0 && out[2] < 0.0);
    unsafe {
        lrvb_fit_free(f);
        lrvb_model_free(m);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let m = normal_normal(&[1.0], 0.0, 1.0);
    let bad = CString::new("prior_eta9").unwrap();
    let s = unsafe { lrvb_model_set_hyperparameter(m, bad.as_ptr(), 1.0) };
    assert_eq!(s, LrvbStatus::UnknownHyperparameter);
    let msg = last_error();
    assert!(msg.starts_with("UnknownHyperparameter") && msg.contains("prior_eta1"), "{msg}");
    assert_eq!(unsafe { CStr::from_ptr(lrvb_status_name(s)) }.to_str().unwrap(), "UnknownHyperparameter");

    let eta2 = CString::new("prior_eta2").unwrap();
    assert_eq!(unsafe { lrvb_model_set_hyperparameter(m, eta2.as_ptr(), 1.0) }, LrvbStatus::DomainError);
    let mut v = 0.0;
    assert_eq!(unsafe { lrvb_model_hyperparameter(m, eta2.as_ptr(), &mut v) }, LrvbStatus::Ok);
    assert_eq!(v, -0.5, "a rejected update leaves the model unchanged");
    assert_eq!(last_error(), "");

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { lrvb_model_normal_normal(ptr::null(), 3, 1.0, 0.0, 1.0, &mut out) }, LrvbStatus::NullPointer);
    assert!(out.is_null());
    assert_eq!(unsafe { lrvb_fit(ptr::null(), 0.0, 0, &mut ptr::null_mut()) }, LrvbStatus::NullPointer);

    let mut name = [0 as c_char; 3];
    let mut needed = 0;
    let s = unsafe { lrvb_model_quantity_name(m, 0, name.as_mut_ptr(), name.len(), &mut needed) };
    assert_eq!(s, LrvbStatus::BufferTooSmall);
    assert_eq!(needed, "theta".len() + 1);

    let path = CString::new("/no/such/file.csv").unwrap();
    assert_eq!(unsafe { lrvb_model_microcredit_csv(path.as_ptr(), &mut out) }, LrvbStatus::IoError);
    unsafe { lrvb_model_free(m) };
}

#[test]
fn iteration_cap_is_a_numerical_failure() {
    let path = CString::new(fixture().to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { lrvb_model_microcredit_csv(path.as_ptr(), &mut m) }, LrvbStatus::Ok);
    let mut f = ptr::null_mut();
    assert_eq!(unsafe { lrvb_fit(m, 0.0, 2, &mut f) }, LrvbStatus::NonConvergence);
    assert!(f.is_null());
    unsafe { lrvb_model_free(m) };
}

#[test]
fn array_and_csv_constructors_agree() {
    let mut rdr = csv_rows();
    let (site, treat, y): (Vec<u32>, Vec<u8>, Vec<f64>) = {
        let mut s = Vec::new();
        let mut t = Vec::new();
        let mut o = Vec::new();
        for (a, b, c) in rdr.by_ref() {
            s.push(a);
            t.push(b);
            o.push(c);
        }
        (s, t, o)
    };
    let mut a = ptr::null_mut();
    assert_eq!(unsafe { lrvb_model_microcredit(site.as_ptr(), treat.as_ptr(), y.as_ptr(), y.len(), &mut a) }, LrvbStatus::Ok);
    let path = CString::new(fixture().to_str().unwrap()).unwrap();
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { lrvb_model_microcredit_csv(path.as_ptr(), &mut b) }, LrvbStatus::Ok);
    let (fa, fb) = (fit(a), fit(b));
    let mut n = 0;
    unsafe { lrvb_model_num_quantities(a, &mut n) };
    assert_eq!(n, 16);
    let (mut ma, mut mb) = (vec![0.0; n], vec![0.0; n]);
    unsafe {
        lrvb_fit_quantities(fa, ma.as_mut_ptr(), ptr::null_mut(), ptr::null_mut(), n);
        lrvb_fit_quantities(fb, mb.as_mut_ptr(), ptr::null_mut(), ptr::null_mut(), n);
    }
    assert_eq!(ma, mb);
    let bad_treat = vec![2u8; y.len()];
    let mut c = ptr::null_mut();
    let s = unsafe { lrvb_model_microcredit(site.as_ptr(), bad_treat.as_ptr(), y.as_ptr(), y.len(), &mut c) };
    assert_eq!(s, LrvbStatus::InvalidInput);
    unsafe {
        lrvb_fit_free(fa);
        lrvb_fit_free(fb);
        lrvb_model_free(a);
        lrvb_model_free(b);
    }
}

/// Minimal reader for the fixture, independent of the library's parser.
fn csv_rows() -> impl Iterator<Item = (u32, u8, f64)> {
    let text = std::fs::read_to_string(fixture()).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect::<Vec<_>>()
        .into_iter()
}

/// Compiles a C client against the generated header and the static library.
#[test]
fn c_client_links_and_runs() {
    let Ok(cc) = std::env::var("CC").or_else(|_| which("cc").ok_or(())) else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib = deps.parent().unwrap().join("liblrvb_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let tmp = std::env::temp_dir().join(format!("lrvb_smoke_{}", std::process::id()));
    let status = Command::new(&cc)
        .arg(dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&tmp)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&tmp).arg(fixture()).output().unwrap();
    let _ = std::fs::remove_file(&tmp);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = String::from_utf8(out.stdout).unwrap();
    let f: Vec<&str> = line.split_whitespace().collect();
    assert_eq!(f[0], "16");
    assert_eq!(f[1], "tau");
    assert!(f[2].parse::<f64>().unwrap().is_finite() && f[3].parse::<f64>().unwrap() > 0.0);
}

fn which(name: &str) -> Option<String> {
    std::env::var_os("PATH")?
        .to_str()?
        .split(':')
        .map(|d| Path::new(d).join(name))
        .find(|p| p.exists())
        .map(|p| p.display().to_string())
}
