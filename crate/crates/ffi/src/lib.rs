//! C ABI over `hardy-lab`.
//!
//! Objects cross the boundary as opaque handles owned by the caller and released with the
//! matching `*_free`. Every fallible call returns an `HlStatus`; on failure the message is
//! kept per thread and read with `hl_last_error`. Panics are caught at the boundary.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hardy_lab::error::Error;
use hardy_lab::experiments::{run, ExperimentConfig};
use hardy_lab::grid::{sample, GridFunction, GridSpec, Profile, TestFamily, C64};
use hardy_lab::norms::{hardy_sobolev_norm, hp_norm, ScaleSet};
use hardy_lab::operators::{adjoint, apply, bessel_potential, operator_by_name, DiffOperator};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HlStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not UTF-8 or not valid JSON for its role.
    BadString = 2,
    /// Config, grid or family rejected.
    Config = 3,
    /// Parameter, shape or domain error inside the library.
    Invalid = 4,
    /// A verification gate failed: non-elliptic operator, kernel constraint, or a report gate.
    Gate = 5,
    /// Ill-conditioning, diverging ladders and other numerical failures.
    Numerical = 6,
    Io = 7,
    Panic = 8,
}

pub struct HlGrid(GridSpec);
pub struct HlField(GridFunction);
pub struct HlOperator(DiffOperator);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> HlStatus {
    match e {
        Error::Config(_) | Error::Json(_) | Error::InvalidGrid(_) | Error::UnknownFamily(_) => HlStatus::Config,
        Error::NotElliptic(_) | Error::KernelConstraintViolated(_) => HlStatus::Gate,
        Error::IllConditioned(_) | Error::MomentCorrectionFailed(_) | Error::LadderDiverged(_) => HlStatus::Numerical,
        Error::Io(_) => HlStatus::Io,
        _ => HlStatus::Invalid,
    }
}

struct Fail(HlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> HlStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            HlStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {msg}"));
            HlStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(HlStatus::NullArgument, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail(HlStatus::NullArgument, format!("{what} is null")))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(HlStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(HlStatus::BadString, format!("{what} is not UTF-8")))
}

fn json<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T, Fail> {
    serde_json::from_str(s).map_err(|e| Fail(HlStatus::BadString, format!("{what}: {e}")))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread; empty after a success. Owned by the library.
#[no_mangle]
pub extern "C" fn hl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hl_grid_new(dim: usize, box_half_width: f64, points_per_axis: usize, margin: f64, out: *mut *mut HlGrid) -> HlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        *out = boxed(HlGrid(GridSpec::new(dim, box_half_width, points_per_axis, margin)?));
        Ok(())
    })
}

/// # Safety
/// `grid` must come from `hl_grid_new` (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hl_grid_free(grid: *mut HlGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Lattice points per channel, or 0 for a null grid.
///
/// # Safety
/// `grid` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn hl_grid_len(grid: *const HlGrid) -> usize {
    grid.as_ref().map(|g| g.0.len()).unwrap_or(0)
}

/// Samples a registered family given as JSON, e.g. `{"name": "gaussian_bump", "params": {"width": 0.3}}`.
///
/// # Safety
/// Pointers must be valid; `family_json` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hl_field_sample(grid: *const HlGrid, family_json: *const c_char, channels: usize, out: *mut *mut HlField) -> HlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let grid = deref(grid, "grid")?;
        let fam: TestFamily = json(text(family_json, "family_json")?, "family_json")?;
        *out = boxed(HlField(sample(&fam, &grid.0, channels)?));
        Ok(())
    })
}

/// Builds a field from channel-major real and imaginary parts of length `len`;
/// `im` may be null for a real field.
///
/// # Safety
/// `re` (and `im` when non-null) must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hl_field_from_values(
    grid: *const HlGrid,
    channels: usize,
    re: *const f64,
    im: *const f64,
    len: usize,
    out: *mut *mut HlField,
) -> HlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let grid = deref(grid, "grid")?;
        if re.is_null() {
            return Err(Fail(HlStatus::NullArgument, "re is null".into()));
        }
        let re = std::slice::from_raw_parts(re, len);
        let values: Vec<C64> = if im.is_null() {
            re.iter().map(|&r| C64::new(r, 0.0)).collect()
        } else {
            re.iter().zip(std::slice::from_raw_parts(im, len)).map(|(&r, &i)| C64::new(r, i)).collect()
        };
        *out = boxed(HlField(GridFunction::from_values(grid.0, channels, values)?));
        Ok(())
    })
}

/// # Safety
/// `field` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn hl_field_len(field: *const HlField) -> usize {
    field.as_ref().map(|f| f.0.values.len()).unwrap_or(0)
}

/// # Safety
/// `field` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn hl_field_channels(field: *const HlField) -> usize {
    field.as_ref().map(|f| f.0.channels).unwrap_or(0)
}

/// Copies the samples out; `len` must equal `hl_field_len`. `im` may be null.
///
/// # Safety
/// `re` (and `im` when non-null) must be writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hl_field_values(field: *const HlField, re: *mut f64, im: *mut f64, len: usize) -> HlStatus {
    guard(|| {
        let field = deref(field, "field")?;
        if re.is_null() {
            return Err(Fail(HlStatus::NullArgument, "re is null".into()));
        }
        let n = field.0.values.len();
        if len != n {
            return Err(Fail(HlStatus::Invalid, format!("buffer holds {len} samples, field has {n}")));
        }
        let re = std::slice::from_raw_parts_mut(re, len);
        for (dst, v) in re.iter_mut().zip(&field.0.values) {
            *dst = v.re;
        }
        if !im.is_null() {
            for (dst, v) in std::slice::from_raw_parts_mut(im, len).iter_mut().zip(&field.0.values) {
                *dst = v.im;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `field` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hl_field_free(field: *mut HlField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Local Hardy norm with the bump profile on the default dyadic scales.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hl_hp_norm(field: *const HlField, p: f64, out: *mut f64) -> HlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = hp_norm(&deref(field, "field")?.0, p, &Profile::Bump, &ScaleSet::default())?;
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hl_hardy_sobolev_norm(field: *const HlField, m: usize, p: f64, homogeneous: bool, out: *mut f64) -> HlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = hardy_sobolev_norm(&deref(field, "field")?.0, m, p, &Profile::Bump, &ScaleSet::default(), homogeneous)?;
        Ok(())
    })
}

/// Registered operator by name; `params_json` is an object of numbers or null.
///
/// # Safety
/// `name` must be NUL-terminated; `params_json` NUL-terminated or null.
#[no_mangle]
pub unsafe extern "C" fn hl_operator_by_name(name: *const c_char, params_json: *const c_char, out: *mut *mut HlOperator) -> HlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let name = text(name, "name")?;
        let params: BTreeMap<String, f64> = if params_json.is_null() { BTreeMap::new() } else { json(text(params_json, "params_json")?, "params_json")? };
        *out = boxed(HlOperator(operator_by_name(name, &params)?));
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hl_operator_adjoint(op: *const HlOperator, out: *mut *mut HlOperator) -> HlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        *out = boxed(HlOperator(adjoint(&deref(op, "op")?.0)?));
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hl_operator_apply(op: *const HlOperator, field: *const HlField, out: *mut *mut HlField) -> HlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        *out = boxed(HlField(apply(&deref(op, "op")?.0, &deref(field, "field")?.0)?));
        Ok(())
    })
}

/// # Safety
/// `op` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hl_operator_free(op: *mut HlOperator) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

/// J_m f = (I - Laplacian)^(-m/2) f.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hl_bessel_potential(field: *const HlField, m: usize, out: *mut *mut HlField) -> HlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        *out = boxed(HlField(bessel_potential(&deref(field, "field")?.0, m)?));
        Ok(())
    })
}

/// Runs an experiment config and returns the report JSON in `*report_json` (free with
/// `hl_string_free`). A report whose gates fail is still returned, with `HL_STATUS_GATE`.
///
/// # Safety
/// `config_json` must be NUL-terminated; `report_json` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hl_run_experiment(config_json: *const c_char, report_json: *mut *mut c_char) -> HlStatus {
    let mut gate_failed = None;
    let status = guard(|| {
        let out = out_ptr(report_json, "report_json")?;
        *out = ptr::null_mut();
        let cfg = ExperimentConfig::from_json(text(config_json, "config_json")?, &[])?;
        let rep = run(&cfg)?;
        let s = CString::new(rep.to_json()?).map_err(|e| Fail(HlStatus::Invalid, e.to_string()))?;
        *out = s.into_raw();
        if !rep.passed() {
            gate_failed = Some(rep.summary_line());
        }
        Ok(())
    });
    match (status, gate_failed) {
        (HlStatus::Ok, Some(line)) => {
            set_error(&line);
            HlStatus::Gate
        }
        (s, _) => s,
    }
}

/// # Safety
/// `s` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
