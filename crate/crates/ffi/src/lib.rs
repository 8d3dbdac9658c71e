//! C ABI over the mfglab value oracle, master residual and transport distance.
//!
//! Handles are opaque and owned by the caller; free them with `mfg_oracle_free`.
//! Every function returns an `MfgStatus`; on failure the message is kept per thread and
//! read back with `mfg_last_error_message`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mfglab::cli::{self, Bound, RunOptions, Scenario};
use mfglab::torus::{w1_distance, Grid, GridMeasure};
use mfglab::valuefn::{master_residual, ValueField, ValueOracle};
use mfglab::Error;

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MfgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    NonConvergence = 3,
    Divergence = 4,
    SchemeViolation = 5,
    BufferTooSmall = 6,
    Io = 7,
    Panic = 8,
    Other = 9,
}

/// Value oracle `U(t, ., m)` built from a scenario document.
pub struct MfgOracle {
    inner: ValueOracle,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> MfgStatus {
    match e.root() {
        Error::NonConvergence { .. } => MfgStatus::NonConvergence,
        Error::Divergence { .. } => MfgStatus::Divergence,
        Error::SchemeViolation { .. } => MfgStatus::SchemeViolation,
        Error::Io(_) => MfgStatus::Io,
        Error::InvalidInput(_)
        | Error::InvalidSpec(_)
        | Error::GridMismatch(_)
        | Error::MassMismatch { .. }
        | Error::OracleTooLarge { .. }
        | Error::Json(_) => MfgStatus::InvalidInput,
        _ => MfgStatus::Other,
    }
}

enum Fail {
    Status(MfgStatus, String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MfgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MfgStatus::Ok,
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("panic inside mfglab".into());
            MfgStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(MfgStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(MfgStatus::InvalidInput, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out(out: *mut f64, out_len: usize, values: &[f64]) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    if out_len < values.len() {
        return Err(Fail::Status(
            MfgStatus::BufferTooSmall,
            format!("output needs {} entries, got {out_len}", values.len()),
        ));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Builds an oracle from a scenario JSON document. Relative kernel paths resolve against
/// `base_dir`, which may be null for the current directory.
///
/// # Safety
/// `scenario_json` and a non-null `base_dir` must be NUL-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn mfg_oracle_new(
    scenario_json: *const c_char,
    base_dir: *const c_char,
    out: *mut *mut MfgOracle,
) -> MfgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let text = str_arg(scenario_json, "scenario_json")?;
        let dir = if base_dir.is_null() { "." } else { str_arg(base_dir, "base_dir")? };
        let bound = Bound::new(Scenario::from_json(text)?, Path::new(dir))?;
        let inner = bound.value_oracle()?;
        *out = Box::into_raw(Box::new(MfgOracle { inner }));
        Ok(())
    })
}

/// # Safety
/// `oracle` must come from `mfg_oracle_new` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mfg_oracle_free(oracle: *mut MfgOracle) {
    if !oracle.is_null() {
        drop(Box::from_raw(oracle));
    }
}

/// Number of grid cells, 0 for a null handle.
///
/// # Safety
/// `oracle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mfg_oracle_cells(oracle: *const MfgOracle) -> usize {
    oracle.as_ref().map_or(0, |o| o.inner.grid().len())
}

/// Time step of the oracle, NaN for a null handle.
///
/// # Safety
/// `oracle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mfg_oracle_dt(oracle: *const MfgOracle) -> f64 {
    oracle.as_ref().map_or(f64::NAN, |o| o.inner.dt())
}

unsafe fn measure_arg(grid: Grid, density: *const f64, len: usize) -> Result<GridMeasure, Fail> {
    let d = slice_arg(density, len, "density")?;
    Ok(GridMeasure::probability(grid, d.to_vec())?)
}

/// `U(t, ., m)` for the probability density `density` (cell values, `h^d sum = 1`).
///
/// # Safety
/// `density` must hold `len` values and `out` must have room for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn mfg_oracle_value(
    oracle: *const MfgOracle,
    t: f64,
    density: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> MfgStatus {
    guard(|| {
        let o = oracle.as_ref().ok_or_else(|| null("oracle"))?;
        let m = measure_arg(o.inner.grid(), density, len)?;
        let u = o.inner.evaluate(t, &m)?;
        write_out(out, out_len, u.values())
    })
}

/// Pointwise master-equation residual at `(t, m)` with flat-derivative step `eps`.
///
/// # Safety
/// Same contract as `mfg_oracle_value`.
#[no_mangle]
pub unsafe extern "C" fn mfg_oracle_master_residual(
    oracle: *const MfgOracle,
    t: f64,
    density: *const f64,
    len: usize,
    eps: f64,
    out: *mut f64,
    out_len: usize,
) -> MfgStatus {
    guard(|| {
        let o = oracle.as_ref().ok_or_else(|| null("oracle"))?;
        let m = measure_arg(o.inner.grid(), density, len)?;
        let r = master_residual(&o.inner, t, &m, eps)?;
        write_out(out, out_len, r.values())
    })
}

/// Monge-Kantorovich distance between two probability densities on the `d`-dimensional
/// grid with `n` points per axis.
///
/// # Safety
/// `a` and `b` must hold `len` values each; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mfg_w1_distance(
    d: usize,
    n: usize,
    a: *const f64,
    b: *const f64,
    len: usize,
    out: *mut f64,
) -> MfgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let grid = Grid::new(d, n)?;
        let mu = measure_arg(grid, a, len)?;
        let nu = measure_arg(grid, b, len)?;
        *out = w1_distance(&mu, &nu)?;
        Ok(())
    })
}

/// Runs a scenario file into `out_dir`; the process-style exit code lands in `exit_code`.
///
/// # Safety
/// Both paths must be NUL-terminated strings; `exit_code` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mfg_run_scenario(
    scenario_path: *const c_char,
    out_dir: *const c_char,
    parallel: bool,
    exit_code: *mut i32,
) -> MfgStatus {
    guard(|| {
        if exit_code.is_null() {
            return Err(null("exit_code"));
        }
        let scenario = str_arg(scenario_path, "scenario_path")?;
        let out = str_arg(out_dir, "out_dir")?;
        let opts = RunOptions { parallel, seed_override: None };
        *exit_code = cli::run(Path::new(scenario), Path::new(out), &opts);
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated, truncated
/// to `len`) and returns its full length without the terminator.
///
/// # Safety
/// `buf` must be null or have room for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn mfg_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let k = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, k);
            *buf.add(k) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mfg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
