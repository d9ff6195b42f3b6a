//! C ABI for qdtn.
//!
//! Objects are opaque handles created by `*_new` functions and released by the matching
//! `*_free`. Every fallible call returns a [`QdtnStatus`]; on failure the message is available
//! from [`qdtn_last_error`] on the same thread until the next failing call. Strings returned
//! through `char **` are owned by the caller and released with [`qdtn_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use qdtn::config::RunConfig;
use qdtn::forward::DtNOperator;
use qdtn::grid::RealTrace;
use qdtn::linearize::extract_g1_g2;
use qdtn::phantom::{Phantom, Preset};
use qdtn::pipeline::{run_pipeline, verify};
use qdtn::Error;

/// Result codes. Invariant and solver failures match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QdtnStatus {
    Ok = 0,
    Other = 1,
    InvariantFailure = 2,
    SolverFailure = 3,
    InvalidArgument = 4,
    Config = 5,
    Io = 6,
    NullPointer = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> QdtnStatus {
    if e.is_invariant_failure() {
        return QdtnStatus::InvariantFailure;
    }
    if e.is_solver_failure() {
        return QdtnStatus::SolverFailure;
    }
    let inner = match e {
        Error::Stage { source, .. } => source.as_ref(),
        other => other,
    };
    match inner {
        Error::Config(_) => QdtnStatus::Config,
        Error::Io(_) | Error::Format(_) => QdtnStatus::Io,
        Error::InvalidArgument(_) | Error::InvalidGrid(_) | Error::GridMismatch | Error::DataTooLarge { .. } => {
            QdtnStatus::InvalidArgument
        }
        _ => QdtnStatus::Other,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), QdtnError>) -> QdtnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QdtnStatus::Ok,
        Ok(Err(QdtnError::Lib(e))) => {
            let s = status_of(&e);
            set_last_error(e.to_string());
            s
        }
        Ok(Err(QdtnError::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            QdtnStatus::NullPointer
        }
        Ok(Err(QdtnError::Arg(msg))) => {
            set_last_error(msg);
            QdtnStatus::InvalidArgument
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            QdtnStatus::Panic
        }
    }
}

enum QdtnError {
    Lib(Error),
    Null(&'static str),
    Arg(String),
}

impl From<Error> for QdtnError {
    fn from(e: Error) -> Self {
        QdtnError::Lib(e)
    }
}

unsafe fn cstr<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, QdtnError> {
    if p.is_null() {
        return Err(QdtnError::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| QdtnError::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, QdtnError> {
    p.as_mut().ok_or(QdtnError::Null(what))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// Message of the last failed call on this thread, or NULL. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn qdtn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn qdtn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opaque run configuration.
pub struct QdtnConfig {
    inner: RunConfig,
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qdtn_config_default(out: *mut *mut QdtnConfig) -> QdtnStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(QdtnConfig {
            inner: RunConfig::default(),
        }));
        Ok(())
    })
}

/// Parses a TOML configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qdtn_config_from_toml(toml: *const c_char, out: *mut *mut QdtnConfig) -> QdtnStatus {
    guard(|| {
        let text = cstr(toml, "toml")?;
        let out = out_ptr(out, "out")?;
        let cfg = RunConfig::parse(text)?;
        *out = Box::into_raw(Box::new(QdtnConfig { inner: cfg }));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qdtn_config_free(cfg: *mut QdtnConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Serializes the configuration as TOML.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qdtn_config_to_toml(cfg: *const QdtnConfig, out: *mut *mut c_char) -> QdtnStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or(QdtnError::Null("cfg"))?;
        let out = out_ptr(out, "out")?;
        *out = into_c_string(cfg.inner.to_toml()?);
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn qdtn_config_set_grid_n(cfg: *mut QdtnConfig, n: usize) -> QdtnStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or(QdtnError::Null("cfg"))?;
        cfg.inner.grid.n = n;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn qdtn_config_set_seed(cfg: *mut QdtnConfig, seed: u64) -> QdtnStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or(QdtnError::Null("cfg"))?;
        cfg.inner.seed = seed;
        Ok(())
    })
}

/// Sets the phantom preset by name (`flat`, `bump_gamma`, `bump_b`, `combined`, `with_remainder`).
///
/// # Safety
/// `cfg` must be a live handle and `name` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn qdtn_config_set_preset(cfg: *mut QdtnConfig, name: *const c_char) -> QdtnStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or(QdtnError::Null("cfg"))?;
        cfg.inner.phantom.preset = cstr(name, "name")?.parse::<Preset>()?;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn qdtn_config_set_output_dir(cfg: *mut QdtnConfig, dir: *const c_char) -> QdtnStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or(QdtnError::Null("cfg"))?;
        cfg.inner.output.dir = PathBuf::from(cstr(dir, "dir")?);
        Ok(())
    })
}

/// Phantom coefficients with their DN operator at the configured ε.
pub struct QdtnModel {
    phantom: Phantom,
    dn: DtNOperator,
    schedule: qdtn::linearize::EpsilonSchedule,
}

/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qdtn_model_new(cfg: *const QdtnConfig, out: *mut *mut QdtnModel) -> QdtnStatus {
    guard(|| {
        let cfg = &cfg.as_ref().ok_or(QdtnError::Null("cfg"))?.inner;
        let out = out_ptr(out, "out")?;
        cfg.validate()?;
        let grid = cfg.grid.build()?;
        let phantom = Phantom::new(&grid, &cfg.phantom)?;
        let dn = DtNOperator::nonlinear(phantom.coeffs.clone(), cfg.data.eps, cfg.solver.options())?;
        let schedule = cfg.eps_schedule()?;
        *out = Box::into_raw(Box::new(QdtnModel { phantom, dn, schedule }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qdtn_model_free(model: *mut QdtnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of boundary nodes, the length of every trace.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qdtn_model_boundary_len(model: *const QdtnModel, out: *mut usize) -> QdtnStatus {
    guard(|| {
        let m = model.as_ref().ok_or(QdtnError::Null("model"))?;
        *out_ptr(out, "out")? = m.dn.grid().n_boundary();
        Ok(())
    })
}

/// Writes the boundary node coordinates as `len` interleaved (x, y, z) triples.
///
/// # Safety
/// `xyz` must point to `3 * len` doubles.
#[no_mangle]
pub unsafe extern "C" fn qdtn_model_boundary_points(model: *const QdtnModel, xyz: *mut f64, len: usize) -> QdtnStatus {
    guard(|| {
        let m = model.as_ref().ok_or(QdtnError::Null("model"))?;
        let grid = m.dn.grid();
        check_len(grid.n_boundary(), len)?;
        if xyz.is_null() {
            return Err(QdtnError::Null("xyz"));
        }
        let out = std::slice::from_raw_parts_mut(xyz, 3 * len);
        for (k, &b) in grid.domain().boundary.iter().enumerate() {
            out[3 * k..3 * k + 3].copy_from_slice(&grid.position(b));
        }
        Ok(())
    })
}

fn check_len(expected: usize, len: usize) -> Result<(), QdtnError> {
    if expected != len {
        return Err(QdtnError::Arg(format!("trace length {len} does not match {expected} boundary nodes")));
    }
    Ok(())
}

unsafe fn read_trace(m: &QdtnModel, f: *const f64, len: usize) -> Result<RealTrace, QdtnError> {
    let grid = m.dn.grid();
    check_len(grid.n_boundary(), len)?;
    if f.is_null() {
        return Err(QdtnError::Null("f"));
    }
    Ok(RealTrace::new(grid.clone(), std::slice::from_raw_parts(f, len).to_vec())?)
}

unsafe fn write_trace(t: &RealTrace, out: *mut f64, what: &'static str) -> Result<(), QdtnError> {
    if out.is_null() {
        return Err(QdtnError::Null(what));
    }
    std::slice::from_raw_parts_mut(out, t.samples.len()).copy_from_slice(&t.samples);
    Ok(())
}

/// Applies the DN map to a boundary trace: the nonlinear map Λ(εf), or Λγ f when `linear` is
/// nonzero.
///
/// # Safety
/// `f` and `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn qdtn_model_dn_apply(
    model: *const QdtnModel,
    f: *const f64,
    len: usize,
    linear: i32,
    out: *mut f64,
) -> QdtnStatus {
    guard(|| {
        let m = model.as_ref().ok_or(QdtnError::Null("model"))?;
        let f = read_trace(m, f, len)?;
        let g = if linear != 0 { m.dn.linear_part().apply(&f) } else { m.dn.dn_apply(&f)? };
        write_trace(&g, out, "out")
    })
}

/// Extracts the first and second linearizations g₁, g₂ of the DN map at f.
///
/// # Safety
/// `f`, `g1` and `g2` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn qdtn_model_linearize(
    model: *const QdtnModel,
    f: *const f64,
    len: usize,
    g1: *mut f64,
    g2: *mut f64,
) -> QdtnStatus {
    guard(|| {
        let m = model.as_ref().ok_or(QdtnError::Null("model"))?;
        let f = read_trace(m, f, len)?;
        let d = extract_g1_g2(&m.dn, &f, &m.schedule)?;
        write_trace(&d.g1, g1, "g1")?;
        write_trace(&d.g2, g2, "g2")
    })
}

/// Peak |b⃗| of the model's phantom.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qdtn_model_b_peak(model: *const QdtnModel, out: *mut f64) -> QdtnStatus {
    guard(|| {
        let m = model.as_ref().ok_or(QdtnError::Null("model"))?;
        let peak = m
            .phantom
            .b()
            .values
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0, f64::max);
        *out_ptr(out, "out")? = peak;
        Ok(())
    })
}

/// Runs the full pipeline, writing the run directory, and returns the metrics as JSON.
///
/// # Safety
/// `cfg` must be a live handle and `metrics_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qdtn_run_pipeline(cfg: *const QdtnConfig, metrics_json: *mut *mut c_char) -> QdtnStatus {
    guard(|| {
        let cfg = &cfg.as_ref().ok_or(QdtnError::Null("cfg"))?.inner;
        let out = out_ptr(metrics_json, "metrics_json")?;
        let m = run_pipeline(cfg)?;
        *out = into_c_string(m.to_json()?);
        Ok(())
    })
}

/// Runs the invariant suite and returns the metrics as JSON. Fails with
/// `QdtnStatus::InvariantFailure` at the first failed check.
///
/// # Safety
/// `cfg` must be a live handle and `metrics_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qdtn_verify(cfg: *const QdtnConfig, metrics_json: *mut *mut c_char) -> QdtnStatus {
    guard(|| {
        let cfg = &cfg.as_ref().ok_or(QdtnError::Null("cfg"))?.inner;
        let out = out_ptr(metrics_json, "metrics_json")?;
        let m = verify(cfg)?;
        *out = into_c_string(m.to_json()?);
        Ok(())
    })
}
