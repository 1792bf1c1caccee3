//! C ABI for the solver library: opaque experiment handles, integer status
//! codes mirroring the CLI exit contract, and a thread-local last-error
//! message. The header is generated into `include/sfbs.h` at build time.
//!
//! Ownership rules: every `char*` returned through an out-parameter is
//! allocated by this library and must be released with [`sfbs_string_free`];
//! handles are released with [`sfbs_experiment_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use sfbs::config::{config_schema, load_config, LoadedConfig};
use sfbs::experiment::{certify, exit_code_for, reproduce_52, run_experiment};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[allow(non_camel_case_types)]
#[allow(clippy::upper_case_acronyms)]
pub enum sfbs_status {
    SFBS_OK = 0,
    /// Runs finished but missed the requested tolerance.
    SFBS_INCOMPLETE = 1,
    SFBS_CERTIFICATE_FAILURE = 2,
    SFBS_DIVERGENCE = 3,
    SFBS_CONFIG_ERROR = 4,
    SFBS_NULL_ARGUMENT = 5,
    SFBS_INVALID_UTF8 = 6,
    SFBS_IO_ERROR = 7,
    SFBS_INTERNAL_PANIC = 8,
}

use sfbs_status::*;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_for(err: &sfbs::Error) -> sfbs_status {
    match exit_code_for(err) {
        2 => SFBS_CERTIFICATE_FAILURE,
        3 => SFBS_DIVERGENCE,
        4 => SFBS_CONFIG_ERROR,
        _ => match err {
            sfbs::Error::Io(_) => SFBS_IO_ERROR,
            _ => SFBS_INCOMPLETE,
        },
    }
}

/// An opened experiment configuration. Opaque to callers.
#[allow(non_camel_case_types)]
pub struct sfbs_experiment {
    loaded: LoadedConfig,
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, sfbs_status> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(SFBS_NULL_ARGUMENT);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        SFBS_INVALID_UTF8
    })
}

fn string_out(value: String, out: *mut *mut c_char) -> sfbs_status {
    if out.is_null() {
        set_error("null output pointer");
        return SFBS_NULL_ARGUMENT;
    }
    match CString::new(value.replace('\0', " ")) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            SFBS_OK
        }
        Err(_) => {
            set_error("output string could not be encoded");
            SFBS_INTERNAL_PANIC
        }
    }
}

fn guarded<F: FnOnce() -> sfbs_status>(f: F) -> sfbs_status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            SFBS_INTERNAL_PANIC
        }
    }
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn sfbs_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread; valid until
/// the next failing call. Do not free.
#[no_mangle]
pub extern "C" fn sfbs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parse and validate a configuration file. On success `*out` owns a handle.
///
/// # Safety
/// `config_path` must be a valid NUL-terminated string and `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn sfbs_experiment_open(
    config_path: *const c_char,
    out: *mut *mut sfbs_experiment,
) -> sfbs_status {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return SFBS_NULL_ARGUMENT;
        }
        let path = match cstr_arg(config_path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_config(&PathBuf::from(path)) {
            Ok(loaded) => {
                *out = Box::into_raw(Box::new(sfbs_experiment { loaded }));
                SFBS_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                status_for(&e)
            }
        }
    })
}

/// Release a handle returned by [`sfbs_experiment_open`]. Null is ignored.
///
/// # Safety
/// `exp` must be a handle from `sfbs_experiment_open` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sfbs_experiment_free(exp: *mut sfbs_experiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Redirect the experiment's artifacts to `dir` (equivalent to the output
/// root override).
///
/// # Safety
/// `exp` must be a live handle; `dir` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sfbs_experiment_set_output_dir(
    exp: *mut sfbs_experiment,
    dir: *const c_char,
) -> sfbs_status {
    guarded(|| {
        if exp.is_null() {
            set_error("null experiment handle");
            return SFBS_NULL_ARGUMENT;
        }
        let dir = match cstr_arg(dir) {
            Ok(d) => d,
            Err(s) => return s,
        };
        (*exp).loaded.config.output.dir = dir.to_string();
        SFBS_OK
    })
}

/// Evaluate the pre-run certificates. `*pass_out` receives the overall
/// verdict and `*report_json_out` (optional) a JSON clause list.
///
/// # Safety
/// `exp` must be a live handle; out-pointers may be null to skip them.
#[no_mangle]
pub unsafe extern "C" fn sfbs_experiment_certify(
    exp: *mut sfbs_experiment,
    pass_out: *mut bool,
    report_json_out: *mut *mut c_char,
) -> sfbs_status {
    guarded(|| {
        if exp.is_null() {
            set_error("null experiment handle");
            return SFBS_NULL_ARGUMENT;
        }
        match certify(&(*exp).loaded) {
            Ok(cert) => {
                if !pass_out.is_null() {
                    *pass_out = cert.pass;
                }
                if !report_json_out.is_null() {
                    let json = serde_json::to_string_pretty(&cert).unwrap_or_default();
                    return string_out(json, report_json_out);
                }
                SFBS_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                status_for(&e)
            }
        }
    })
}

/// Execute every seeded run. `*exit_code_out` receives the CLI-compatible
/// exit code; `*summary_path_out` (optional) the path of `summary.json`.
/// The return status mirrors the exit code.
///
/// # Safety
/// `exp` must be a live handle; out-pointers may be null to skip them.
#[no_mangle]
pub unsafe extern "C" fn sfbs_experiment_run(
    exp: *mut sfbs_experiment,
    exit_code_out: *mut i32,
    summary_path_out: *mut *mut c_char,
) -> sfbs_status {
    guarded(|| {
        if exp.is_null() {
            set_error("null experiment handle");
            return SFBS_NULL_ARGUMENT;
        }
        match run_experiment(&(*exp).loaded) {
            Ok(outcome) => {
                if !exit_code_out.is_null() {
                    *exit_code_out = outcome.exit_code;
                }
                if !summary_path_out.is_null() {
                    let s = string_out(
                        outcome.summary_path.to_string_lossy().into_owned(),
                        summary_path_out,
                    );
                    if s != SFBS_OK {
                        return s;
                    }
                }
                match outcome.exit_code {
                    0 => SFBS_OK,
                    2 => {
                        set_error(&outcome.message);
                        SFBS_CERTIFICATE_FAILURE
                    }
                    3 => {
                        set_error(&outcome.message);
                        SFBS_DIVERGENCE
                    }
                    _ => {
                        set_error(&outcome.message);
                        SFBS_INCOMPLETE
                    }
                }
            }
            Err(e) => {
                set_error(&e.to_string());
                status_for(&e)
            }
        }
    })
}

/// Run the growing-batch reproduction; `*summary_json_out` (optional)
/// receives the fitted-slope summary as JSON.
///
/// # Safety
/// `exp` must be a live handle; `summary_json_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn sfbs_experiment_reproduce52(
    exp: *mut sfbs_experiment,
    summary_json_out: *mut *mut c_char,
) -> sfbs_status {
    guarded(|| {
        if exp.is_null() {
            set_error("null experiment handle");
            return SFBS_NULL_ARGUMENT;
        }
        match reproduce_52(&(*exp).loaded) {
            Ok(summary) => {
                if !summary_json_out.is_null() {
                    let json = serde_json::to_string_pretty(&summary).unwrap_or_default();
                    return string_out(json, summary_json_out);
                }
                SFBS_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                status_for(&e)
            }
        }
    })
}

/// The configuration schema as a JSON string; free with
/// [`sfbs_string_free`]. Returns null only on allocation failure.
#[no_mangle]
pub extern "C" fn sfbs_config_schema_json() -> *mut c_char {
    let json = serde_json::to_string_pretty(&config_schema()).unwrap_or_default();
    CString::new(json).map(CString::into_raw).unwrap_or(std::ptr::null_mut())
}

/// Release a string allocated by this library. Null is ignored.
///
/// # Safety
/// `s` must originate from an `sfbs_*` call and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sfbs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
