//! C ABI over the layered-control library.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `_free` function. Matrices cross the boundary row-major. Every
//! fallible call returns an [`LcStatus`]; the message of the last failure on
//! the calling thread is available from [`lc_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use layered_control::dual::{run_exact_dual_learning, DualLearnConfig, StepSize};
use layered_control::error::Error;
use layered_control::experiment::{cmd_clqr, cmd_lqr_table, cmd_rho_sweep, cmd_verify_theory, ExperimentConfig};
use layered_control::oracle::TrackingOracle;
use layered_control::planner::constrained_optimum;
use layered_control::system::{sample_system, ConstraintSpec, LayeredProblem, LtiSystem};
use nalgebra::{DMatrix, DVector};

/// Result codes; zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Numerical = 4,
    Infeasible = 5,
    Io = 6,
    VerificationFailed = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Finite-horizon layered LQ problem.
pub struct LcProblem(LayeredProblem);

/// Exact tracking oracle of a problem.
pub struct LcOracle(TrackingOracle);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> LcStatus {
    match e {
        Error::Dimension { .. } => LcStatus::DimensionMismatch,
        Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => LcStatus::InvalidArgument,
        Error::IllConditioned { .. } | Error::Degenerate(_) | Error::PerturbationTooLarge(_) => LcStatus::Numerical,
        Error::Infeasible(_) => LcStatus::Infeasible,
        Error::Io(_) => LcStatus::Io,
        Error::Verification(_) => LcStatus::VerificationFailed,
    }
}

enum Failure {
    Status(LcStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Lib(e)
    }
}

fn fail<T>(status: LcStatus, msg: &str) -> Result<T, Failure> {
    Err(Failure::Status(status, msg.into()))
}

/// Runs `f`, records failures and converts panics into [`LcStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LcStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            LcStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or point to `len` readable doubles.
unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(LcStatus::NullPointer, &format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or point to `len` writable doubles.
unsafe fn output<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return fail(LcStatus::NullPointer, &format!("{what} is null"));
    }
    if len < need {
        return fail(LcStatus::BufferTooSmall, &format!("{what} holds {len} values, needs {need}"));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

/// # Safety
/// `p` must be null or a valid handle pointer.
unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::Status(LcStatus::NullPointer, format!("{what} is null")))
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(LcStatus::NullPointer, &format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(LcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return fail(LcStatus::NullPointer, "output handle is null");
    }
    // SAFETY: checked non-null; the caller provides a writable slot.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length, or 0 when none.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lc_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Builds a problem with `Q` of size `dx × dx` and `R` of size `du × du`.
///
/// # Safety
/// Array arguments must hold the stated number of doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_problem_new(
    a: *const f64,
    b: *const f64,
    dx: usize,
    du: usize,
    horizon: usize,
    q: *const f64,
    r: *const f64,
    rho: f64,
    out: *mut *mut LcProblem,
) -> LcStatus {
    guard(|| {
        let a = DMatrix::from_row_slice(dx, dx, input(a, dx * dx, "A")?);
        let b = DMatrix::from_row_slice(dx, du, input(b, dx * du, "B")?);
        let q = DMatrix::from_row_slice(dx, dx, input(q, dx * dx, "Q")?);
        let r = DMatrix::from_row_slice(du, du, input(r, du * du, "R")?);
        let problem = LayeredProblem::new(LtiSystem::new(a, b)?, horizon, q, r, rho)?;
        store(out, LcProblem(problem))
    })
}

/// Seeded random system with `Q = I` and `R = input_weight · I`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_problem_sample(
    seed: u64,
    dx: usize,
    du: usize,
    spectral_radius: f64,
    horizon: usize,
    input_weight: f64,
    rho: f64,
    out: *mut *mut LcProblem,
) -> LcStatus {
    guard(|| {
        let sys = sample_system(seed, dx, du, spectral_radius)?.system;
        let q = DMatrix::identity(dx, dx);
        let r = DMatrix::identity(du, du) * input_weight;
        store(out, LcProblem(LayeredProblem::new(sys, horizon, q, r, rho)?))
    })
}

/// Imposes `x_{t,i} ≥ bound` for `t ≥ 1`.
///
/// # Safety
/// `problem` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lc_problem_set_lower_bound(problem: *mut LcProblem, bound: f64) -> LcStatus {
    guard(|| {
        let p = problem
            .as_mut()
            .ok_or_else(|| Failure::Status(LcStatus::NullPointer, "problem is null".into()))?;
        let spec = ConstraintSpec::uniform_lower(p.0.horizon(), p.0.output_dim(), bound);
        p.0 = p.0.clone().constrained(spec)?;
        Ok(())
    })
}

/// # Safety
/// `problem` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lc_problem_free(problem: *mut LcProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Length of the stacked reference `(T + 1) d_z`, or 0 for a null handle.
///
/// # Safety
/// `problem` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lc_problem_reference_len(problem: *const LcProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.0.reference_len())
}

/// Optimal cost of the original problem from `xi`, honoring constraints.
///
/// # Safety
/// `xi` must hold `xi_len` doubles; `cost` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_problem_optimal_cost(
    problem: *const LcProblem,
    xi: *const f64,
    xi_len: usize,
    cost: *mut f64,
) -> LcStatus {
    guard(|| {
        let p = &handle(problem, "problem")?.0;
        let xi = DVector::from_column_slice(input(xi, xi_len, "xi")?);
        let oracle = TrackingOracle::build(p)?;
        let sol = constrained_optimum(p, &oracle, &xi)?;
        output(cost, 1, 1, "cost")?[0] = sol.cost;
        Ok(())
    })
}

/// # Safety
/// `problem` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_oracle_new(problem: *const LcProblem, out: *mut *mut LcOracle) -> LcStatus {
    guard(|| {
        let p = &handle(problem, "problem")?.0;
        store(out, LcOracle(TrackingOracle::build(p)?))
    })
}

/// # Safety
/// `oracle` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lc_oracle_free(oracle: *mut LcOracle) {
    if !oracle.is_null() {
        drop(Box::from_raw(oracle));
    }
}

/// Writes the optimal dual gain `Θ*` row-major, `(T + 1) d_z × d_x` values.
///
/// # Safety
/// `buf` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn lc_oracle_theta_star(oracle: *const LcOracle, buf: *mut f64, len: usize) -> LcStatus {
    guard(|| {
        let o = &handle(oracle, "oracle")?.0;
        let theta = o.theta_star();
        let dst = output(buf, len, theta.len(), "buffer")?;
        for (i, row) in theta.row_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                dst[i * theta.ncols() + j] = *v;
            }
        }
        Ok(())
    })
}

/// Plans with dual `nu`, tracks `r + nu` exactly, and writes the plan `r`
/// and the residual `r − 𝒞x`, each of reference length.
///
/// # Safety
/// Input arrays must hold their stated lengths; outputs hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lc_oracle_plan_and_track(
    oracle: *const LcOracle,
    nu: *const f64,
    nu_len: usize,
    xi: *const f64,
    xi_len: usize,
    r_out: *mut f64,
    residual_out: *mut f64,
    out_len: usize,
) -> LcStatus {
    guard(|| {
        let o = &handle(oracle, "oracle")?.0;
        let nu = DVector::from_column_slice(input(nu, nu_len, "nu")?);
        let xi = DVector::from_column_slice(input(xi, xi_len, "xi")?);
        let (r, _, res) = o.plan_and_track(&nu, &xi)?;
        output(r_out, out_len, r.len(), "r_out")?.copy_from_slice(r.as_slice());
        output(residual_out, out_len, res.len(), "residual_out")?.copy_from_slice(res.as_slice());
        Ok(())
    })
}

/// Exact dual learning from `Θ = 0`; writes `‖Θ^(k) − Θ*‖₂` for
/// `k = 0..=iterations`. A nonpositive `eta` selects the recommended step.
///
/// # Safety
/// `problem` must be a live handle; `trace` must hold `trace_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lc_exact_dual_trace(
    problem: *const LcProblem,
    eta: f64,
    batch: usize,
    iterations: usize,
    seed: u64,
    trace: *mut f64,
    trace_len: usize,
) -> LcStatus {
    guard(|| {
        let p = &handle(problem, "problem")?.0;
        let dst = output(trace, trace_len, iterations + 1, "trace")?;
        let oracle = TrackingOracle::build(p)?;
        let eta = if eta > 0.0 { StepSize::Fixed(eta) } else { StepSize::Auto };
        let config = DualLearnConfig { eta, batch, iterations, seed, initial: None };
        let run = run_exact_dual_learning(p, &oracle, &config)?;
        dst.copy_from_slice(&run.spectral);
        Ok(())
    })
}

/// Runs an experiment command (`verify-theory`, `lqr-table`, `rho-sweep`
/// or `clqr`) with a flat JSON config; `config_json` may be null.
///
/// # Safety
/// String arguments must be null or valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn lc_run_command(command: *const c_char, config_json: *const c_char) -> LcStatus {
    guard(|| {
        let command = text(command, "command")?;
        let config = if config_json.is_null() {
            ExperimentConfig::default()
        } else {
            ExperimentConfig::from_json_str(text(config_json, "config")?)?
        };
        match command {
            "verify-theory" => cmd_verify_theory(&config)?,
            "lqr-table" => cmd_lqr_table(&config)?,
            "rho-sweep" => cmd_rho_sweep(&config)?,
            "clqr" => cmd_clqr(&config)?,
            other => return fail(LcStatus::InvalidArgument, &format!("unknown command {other:?}")),
        };
        Ok(())
    })
}
