//! C ABI over the `icopt` solvers.
//!
//! Problems and solutions are opaque handles owned by the caller and released
//! with the matching `*_free` function. Every fallible call returns an
//! `ICOPT_*` status code; on failure the message is available from
//! [`icopt_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use icopt::cli::{self, Outcome, RunOptions, RunReport};
use icopt::discretize::QuadratureRule;
use icopt::kernelspec::{parse_problem, ProblemSpec};

pub const ICOPT_OK: i32 = 0;
pub const ICOPT_ERR_NULL_ARG: i32 = 1;
pub const ICOPT_ERR_PARSE: i32 = 2;
pub const ICOPT_ERR_SOLVER: i32 = 3;
pub const ICOPT_ERR_NONCONVERGENCE: i32 = 4;
pub const ICOPT_ERR_INVALID_ARG: i32 = 5;
pub const ICOPT_ERR_BUFFER_TOO_SMALL: i32 = 6;
pub const ICOPT_ERR_PANIC: i32 = 7;

/// Use the rule from the problem file.
pub const ICOPT_RULE_DEFAULT: i32 = 0;
pub const ICOPT_RULE_TRAPEZOID: i32 = 1;
pub const ICOPT_RULE_GAUSS: i32 = 2;

/// Also solve by the resolvent path and record the agreement (Volterra).
pub const ICOPT_FLAG_COMPARE_PATHS: u32 = 1;
/// Build `K1` with `B(σ, t)` in place of `B(σ, s)` (Volterra).
pub const ICOPT_FLAG_PRINTED_K1: u32 = 2;

pub const ICOPT_FIELD_NODES: i32 = 0;
pub const ICOPT_FIELD_CONTROL: i32 = 1;
pub const ICOPT_FIELD_STATE: i32 = 2;
pub const ICOPT_FIELD_COSTATE: i32 = 3;

/// A parsed problem.
pub struct IcoptProblem {
    spec: ProblemSpec,
}

/// A solved problem.
pub struct IcoptSolution {
    outcome: Outcome,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(code: i32, msg: &str) -> i32 {
    set_error(msg);
    code
}

fn guard(f: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => fail(ICOPT_ERR_PANIC, "internal panic"),
    }
}

/// Message for the most recent failure on the calling thread, or an empty
/// string. The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn icopt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn icopt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a JSON problem. On success `*out` owns a new handle.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn icopt_problem_parse(json: *const c_char, out: *mut *mut IcoptProblem) -> i32 {
    guard(|| {
        if json.is_null() || out.is_null() {
            return fail(ICOPT_ERR_NULL_ARG, "null argument");
        }
        *out = ptr::null_mut();
        let Ok(text) = CStr::from_ptr(json).to_str() else {
            return fail(ICOPT_ERR_PARSE, "problem text is not valid UTF-8");
        };
        match parse_problem(text) {
            Ok(spec) => {
                *out = Box::into_raw(Box::new(IcoptProblem { spec }));
                ICOPT_OK
            }
            Err(e) => fail(ICOPT_ERR_PARSE, &e.to_string()),
        }
    })
}

/// # Safety
/// `p` must be null or a handle from [`icopt_problem_parse`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn icopt_problem_free(p: *mut IcoptProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Solves `problem`. `grid_n = 0` keeps the node count of the problem file;
/// `rule` is one of `ICOPT_RULE_*`; `flags` combines `ICOPT_FLAG_*`.
///
/// # Safety
/// `problem` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn icopt_solve(
    problem: *const IcoptProblem,
    grid_n: usize,
    rule: i32,
    flags: u32,
    out: *mut *mut IcoptSolution,
) -> i32 {
    guard(|| {
        if problem.is_null() || out.is_null() {
            return fail(ICOPT_ERR_NULL_ARG, "null argument");
        }
        *out = ptr::null_mut();
        let mut spec = (*problem).spec.clone();
        if grid_n != 0 {
            spec.settings.grid_n = grid_n;
        }
        spec.settings.rule = match rule {
            ICOPT_RULE_DEFAULT => spec.settings.rule,
            ICOPT_RULE_TRAPEZOID => QuadratureRule::Trapezoid,
            ICOPT_RULE_GAUSS => QuadratureRule::GaussLegendre,
            r => return fail(ICOPT_ERR_INVALID_ARG, &format!("unknown rule {r}")),
        };
        if flags & !(ICOPT_FLAG_COMPARE_PATHS | ICOPT_FLAG_PRINTED_K1) != 0 {
            return fail(ICOPT_ERR_INVALID_ARG, &format!("unknown flags {flags:#x}"));
        }
        let opts = RunOptions {
            compare_paths: flags & ICOPT_FLAG_COMPARE_PATHS != 0,
            use_printed_k1: flags & ICOPT_FLAG_PRINTED_K1 != 0,
        };
        match cli::solve_problem(&spec, opts) {
            Ok(outcome) => {
                *out = Box::into_raw(Box::new(IcoptSolution { outcome }));
                ICOPT_OK
            }
            Err(e) => fail(cli::exit_code(&e), &e.to_string()),
        }
    })
}

/// # Safety
/// `s` must be null or a handle from [`icopt_solve`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn icopt_solution_free(s: *mut IcoptSolution) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// # Safety
/// `s` must be a live handle and `cost` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn icopt_solution_cost(s: *const IcoptSolution, cost: *mut f64) -> i32 {
    guard(|| {
        if s.is_null() || cost.is_null() {
            return fail(ICOPT_ERR_NULL_ARG, "null argument");
        }
        *cost = (*s).outcome.cost;
        ICOPT_OK
    })
}

/// Node count and component counts. `state_dim` is 0 for problems without a
/// state (quadratic forms).
///
/// # Safety
/// `s` must be a live handle; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn icopt_solution_dims(
    s: *const IcoptSolution,
    nodes: *mut usize,
    state_dim: *mut usize,
    control_dim: *mut usize,
) -> i32 {
    guard(|| {
        if s.is_null() || nodes.is_null() || state_dim.is_null() || control_dim.is_null() {
            return fail(ICOPT_ERR_NULL_ARG, "null argument");
        }
        let o = &(*s).outcome;
        *nodes = o.grid.len();
        *state_dim = o.state.as_ref().map_or(0, |f| f.dim());
        *control_dim = o.control.dim();
        ICOPT_OK
    })
}

/// Copies one field (`ICOPT_FIELD_*`) into `buf`, node-major. `*required`
/// receives the element count; when `len` is smaller nothing is copied and
/// `ICOPT_ERR_BUFFER_TOO_SMALL` is returned. A field the problem kind lacks
/// has length 0.
///
/// # Safety
/// `s` must be a live handle, `required` valid, and `buf` valid for `len`
/// writes (it may be null when `len` is 0).
#[no_mangle]
pub unsafe extern "C" fn icopt_solution_copy(
    s: *const IcoptSolution,
    field: i32,
    buf: *mut f64,
    len: usize,
    required: *mut usize,
) -> i32 {
    guard(|| {
        if s.is_null() || required.is_null() {
            return fail(ICOPT_ERR_NULL_ARG, "null argument");
        }
        let o = &(*s).outcome;
        let data: Vec<f64> = match field {
            ICOPT_FIELD_NODES => o.grid.nodes().to_vec(),
            ICOPT_FIELD_CONTROL => o.control.stacked().as_slice().to_vec(),
            ICOPT_FIELD_STATE => o.state.as_ref().map_or(Vec::new(), |f| f.stacked().as_slice().to_vec()),
            ICOPT_FIELD_COSTATE => o.costate.as_ref().map_or(Vec::new(), |f| f.stacked().as_slice().to_vec()),
            f => return fail(ICOPT_ERR_INVALID_ARG, &format!("unknown field {f}")),
        };
        *required = data.len();
        if data.is_empty() {
            return ICOPT_OK;
        }
        if len < data.len() {
            return fail(
                ICOPT_ERR_BUFFER_TOO_SMALL,
                &format!("buffer holds {len} values, {} needed", data.len()),
            );
        }
        if buf.is_null() {
            return fail(ICOPT_ERR_NULL_ARG, "null buffer");
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        ICOPT_OK
    })
}

/// The solution as the same JSON document the command line writes with
/// timings disabled. Release the string with [`icopt_string_free`].
///
/// # Safety
/// `s` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn icopt_solution_to_json(s: *const IcoptSolution, out: *mut *mut c_char) -> i32 {
    guard(|| {
        if s.is_null() || out.is_null() {
            return fail(ICOPT_ERR_NULL_ARG, "null argument");
        }
        let o = &(*s).outcome;
        let mut report = RunReport::from_outcome("solve", o);
        report.solution = Some(o.solution_data());
        match CString::new(report.to_json()) {
            Ok(c) => {
                *out = c.into_raw();
                ICOPT_OK
            }
            Err(_) => fail(ICOPT_ERR_SOLVER, "report contains a NUL byte"),
        }
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn icopt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
