//! C ABI over `tmletrunc`.
//!
//! Objects cross the boundary as opaque handles created by `tmle_*_new` or
//! `tmle_*` constructors and released with the matching `*_free`. Every
//! fallible call returns a [`TmleStatus`]; on failure a message is available
//! from [`tmle_last_error_message`] on the same thread.
//!
//! Integer enum arguments use the `TMLE_*` codes of [`TmleStrategy`],
//! [`TmleLink`], [`TmleMisspec`], [`TmleSelector`] and [`TmleVariance`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use tmletrunc::adaptive::{StopReason, VarianceSource};
use tmletrunc::datagen::{gen_dataset_with, true_ate, Dataset, Misspec, Scenario};
use tmletrunc::harness::{evaluate_group, grid_levels, select_on_levels, GroupPlan, LepskiCi};
use tmletrunc::linalg::Matrix;
use tmletrunc::nuisance::NuisanceFits;
use tmletrunc::rng::{hash_bytes, mix64, StreamKey};
use tmletrunc::targeting::{Link, Strategy, TargetingInputs, TmleFit};
use tmletrunc::truncation::{trunc_bound, TruncationSpec};
use tmletrunc::variance::{var_eif, var_plugin};
use tmletrunc::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmleStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    SingleArm = 3,
    RankDeficient = 4,
    ConstantOutcome = 5,
    EmptyArm = 6,
    TooFewDraws = 7,
    Parse = 8,
    Io = 9,
    Internal = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmleStrategy {
    Gh = 0,
    Gwt = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmleLink {
    Logit = 0,
    Linear = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmleMisspec {
    High = 0,
    Moderate = 1,
    NearlyCorrect = 2,
}

/// Selectors available outside a simulation.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmleSelector {
    Eifb = 0,
    Tbb = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmleVariance {
    Eif = 0,
    PlugIn = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmleStopReason {
    Lepski = 0,
    Brake = 1,
    Exhausted = 2,
}

/// Observed data `(W, A, Y)`.
pub struct TmleDataset {
    inner: Dataset,
}

/// Targeted fit at one truncation level.
pub struct TmleEstimate {
    fit: TmleFit,
    var_eif: f64,
    var_plugin: f64,
}

/// Adaptive truncation choice.
pub struct TmleSelection {
    chosen_c: f64,
    psi: f64,
    lower: f64,
    upper: f64,
    stop: TmleStopReason,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> TmleStatus {
    match e {
        Error::Config(_) | Error::Input(_) => TmleStatus::InvalidArgument,
        Error::SingleArm { .. } => TmleStatus::SingleArm,
        Error::RankDeficient { .. } => TmleStatus::RankDeficient,
        Error::ConstantOutcome(_) => TmleStatus::ConstantOutcome,
        Error::EmptyArm { .. } => TmleStatus::EmptyArm,
        Error::TooFewDraws { .. } => TmleStatus::TooFewDraws,
        Error::Parse { .. } => TmleStatus::Parse,
        Error::Io { .. } => TmleStatus::Io,
    }
}

fn fail(status: TmleStatus, msg: &str) -> TmleStatus {
    set_last_error(msg);
    status
}

/// Runs `f`, mapping errors and panics to a status.
fn guard(f: impl FnOnce() -> Result<(), (TmleStatus, String)>) -> TmleStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            TmleStatus::Ok
        }
        Ok(Err((s, msg))) => fail(s, &msg),
        Err(_) => fail(TmleStatus::Internal, "internal panic"),
    }
}

fn lib_err(e: Error) -> (TmleStatus, String) {
    (status_of(&e), e.to_string())
}

fn arg_err(msg: &str) -> (TmleStatus, String) {
    (TmleStatus::InvalidArgument, msg.to_string())
}

fn null_err(what: &str) -> (TmleStatus, String) {
    (TmleStatus::NullPointer, format!("{what} is null"))
}

fn strategy_of(code: i32) -> Result<Strategy, (TmleStatus, String)> {
    match code {
        0 => Ok(Strategy::GH),
        1 => Ok(Strategy::GWT),
        _ => Err(arg_err("unknown strategy code")),
    }
}

fn link_of(code: i32) -> Result<Link, (TmleStatus, String)> {
    match code {
        0 => Ok(Link::Logit),
        1 => Ok(Link::Linear),
        _ => Err(arg_err("unknown link code")),
    }
}

fn misspec_of(code: i32) -> Result<Misspec, (TmleStatus, String)> {
    match code {
        0 => Ok(Misspec::High),
        1 => Ok(Misspec::Moderate),
        2 => Ok(Misspec::NearlyCorrect),
        _ => Err(arg_err("unknown misspecification code")),
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn tmle_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Truncation bound `c / (sqrt(n) ln n)`.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tmle_trunc_bound(c: f64, n: usize, out: *mut f64) -> TmleStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        let b = trunc_bound(c, n).map_err(lib_err)?;
        unsafe { *out = b };
        Ok(())
    })
}

/// True ATE of the simulation design, or NaN for an unknown code.
#[no_mangle]
pub extern "C" fn tmle_true_ate(misspec: i32) -> f64 {
    misspec_of(misspec).map_or(f64::NAN, true_ate)
}

/// Copies user data into a new dataset. `w` is row-major `n x p`.
///
/// # Safety
/// `w` must hold `n * p` doubles, `a` and `y` `n` values each, and `out`
/// must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tmle_dataset_new(
    w: *const f64,
    n: usize,
    p: usize,
    a: *const u8,
    y: *const f64,
    out: *mut *mut TmleDataset,
) -> TmleStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        unsafe { *out = ptr::null_mut() };
        if w.is_null() || a.is_null() || y.is_null() {
            return Err(null_err("data pointer"));
        }
        let len = n.checked_mul(p).ok_or_else(|| arg_err("n * p overflows"))?;
        let (w, a, y) = unsafe {
            (
                std::slice::from_raw_parts(w, len).to_vec(),
                std::slice::from_raw_parts(a, n).to_vec(),
                std::slice::from_raw_parts(y, n).to_vec(),
            )
        };
        let m = Matrix::from_row_major(n, p, w).map_err(lib_err)?;
        let ds = Dataset::new(m, a, y).map_err(lib_err)?;
        unsafe { *out = Box::into_raw(Box::new(TmleDataset { inner: ds })) };
        Ok(())
    })
}

/// Draws replication `rep` of a simulation scenario.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tmle_dataset_generate(
    n: usize,
    kappa: f64,
    misspec: i32,
    rct: bool,
    seed: u64,
    rep: u64,
    out: *mut *mut TmleDataset,
) -> TmleStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        unsafe { *out = ptr::null_mut() };
        let s = Scenario::new(n, kappa, misspec_of(misspec)?, rct, seed).map_err(lib_err)?;
        let ds = gen_dataset_with(&s, &mut s.replication_key(rep).rng()).map_err(lib_err)?;
        unsafe { *out = Box::into_raw(Box::new(TmleDataset { inner: ds })) };
        Ok(())
    })
}

/// Reads a CSV with columns `w1..wp, a, y`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tmle_dataset_read_csv(path: *const c_char, out: *mut *mut TmleDataset) -> TmleStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        unsafe { *out = ptr::null_mut() };
        if path.is_null() {
            return Err(null_err("path"));
        }
        let p = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| arg_err("path is not UTF-8"))?;
        let ds = Dataset::read_csv(p).map_err(lib_err)?;
        unsafe { *out = Box::into_raw(Box::new(TmleDataset { inner: ds })) };
        Ok(())
    })
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn tmle_dataset_n(ds: *const TmleDataset) -> usize {
    unsafe { ds.as_ref() }.map_or(0, |d| d.inner.n())
}

/// Number of covariate columns, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn tmle_dataset_p(ds: *const TmleDataset) -> usize {
    unsafe { ds.as_ref() }.map_or(0, |d| d.inner.w.cols())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tmle_dataset_free(ds: *mut TmleDataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds) });
    }
}

/// Fits the nuisances (main-effects working models on every covariate),
/// truncates at constant `c` and targets.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tmle_estimate(
    ds: *const TmleDataset,
    c: f64,
    strategy: i32,
    link: i32,
    out: *mut *mut TmleEstimate,
) -> TmleStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        unsafe { *out = ptr::null_mut() };
        let ds = &unsafe { ds.as_ref() }.ok_or_else(|| null_err("dataset"))?.inner;
        let (strategy, link) = (strategy_of(strategy)?, link_of(link)?);
        let all: Vec<usize> = (0..ds.w.cols()).collect();
        let nuis = NuisanceFits::fit(ds, &all).map_err(lib_err)?;
        let inputs = TargetingInputs::new(ds, &nuis).map_err(lib_err)?;
        let spec = TruncationSpec::new(c, ds.n()).map_err(lib_err)?;
        let g = inputs.truncate(&spec);
        let fit = inputs.fit_truncated(&g, &spec, strategy, link).map_err(lib_err)?;
        let var_eif = var_eif(&fit.eif).value;
        let var_plugin = var_plugin(&fit.q1_star, &fit.q0_star, &nuis.residual_variance, &g, fit.psi_hat).value;
        unsafe {
            *out = Box::into_raw(Box::new(TmleEstimate {
                fit,
                var_eif,
                var_plugin,
            }))
        };
        Ok(())
    })
}

/// Targeted ATE estimate, or NaN for a null handle.
///
/// # Safety
/// `est` must be null or a live estimate handle.
#[no_mangle]
pub unsafe extern "C" fn tmle_estimate_psi(est: *const TmleEstimate) -> f64 {
    unsafe { est.as_ref() }.map_or(f64::NAN, |e| e.fit.psi_hat)
}

/// Variance estimate by method code.
///
/// # Safety
/// `est` must be a live estimate handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tmle_estimate_variance(est: *const TmleEstimate, method: i32, out: *mut f64) -> TmleStatus {
    guard(|| {
        let e = unsafe { est.as_ref() }.ok_or_else(|| null_err("estimate"))?;
        if out.is_null() {
            return Err(null_err("out"));
        }
        let v = match method {
            0 => e.var_eif,
            1 => e.var_plugin,
            _ => return Err(arg_err("unknown variance code")),
        };
        unsafe { *out = v };
        Ok(())
    })
}

/// Fluctuation parameters and whether both arms converged.
///
/// # Safety
/// `est` must be a live estimate handle; the out pointers must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn tmle_estimate_fluctuation(
    est: *const TmleEstimate,
    eps1: *mut f64,
    eps0: *mut f64,
    converged: *mut bool,
) -> TmleStatus {
    guard(|| {
        let e = unsafe { est.as_ref() }.ok_or_else(|| null_err("estimate"))?;
        if eps1.is_null() || eps0.is_null() || converged.is_null() {
            return Err(null_err("out"));
        }
        unsafe {
            *eps1 = e.fit.fluct.eps1;
            *eps0 = e.fit.fluct.eps0;
            *converged = e.fit.fluct.converged;
        }
        Ok(())
    })
}

/// Rows whose treated / control probability was raised to the bound.
///
/// # Safety
/// `est` must be a live estimate handle; the out pointers must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn tmle_estimate_activations(
    est: *const TmleEstimate,
    treated: *mut usize,
    control: *mut usize,
) -> TmleStatus {
    guard(|| {
        let e = unsafe { est.as_ref() }.ok_or_else(|| null_err("estimate"))?;
        if treated.is_null() || control.is_null() {
            return Err(null_err("out"));
        }
        unsafe {
            *treated = e.fit.activated_1;
            *control = e.fit.activated_0;
        }
        Ok(())
    })
}

/// # Safety
/// `est` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tmle_estimate_free(est: *mut TmleEstimate) {
    if !est.is_null() {
        drop(unsafe { Box::from_raw(est) });
    }
}

/// Adaptive truncation over an ascending grid of `k` constants.
/// `boot_reps` and `seed` are used by the bootstrap selector only.
///
/// # Safety
/// `ds` must be a live dataset handle, `grid` must hold `k` doubles and
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tmle_select(
    ds: *const TmleDataset,
    grid: *const f64,
    k: usize,
    strategy: i32,
    link: i32,
    selector: i32,
    boot_reps: usize,
    brake_multiplier: f64,
    seed: u64,
    out: *mut *mut TmleSelection,
) -> TmleStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        unsafe { *out = ptr::null_mut() };
        let ds = &unsafe { ds.as_ref() }.ok_or_else(|| null_err("dataset"))?.inner;
        if grid.is_null() || k == 0 {
            return Err(arg_err("grid is empty"));
        }
        let grid = unsafe { std::slice::from_raw_parts(grid, k) }.to_vec();
        let (strategy, link) = (strategy_of(strategy)?, link_of(link)?);
        let source = match selector {
            0 => VarianceSource::EIFb,
            1 => VarianceSource::TBb,
            _ => return Err(arg_err("unknown selector code")),
        };
        if !(brake_multiplier >= 0.0) {
            return Err(arg_err("brake multiplier must be nonnegative"));
        }
        if source == VarianceSource::TBb && boot_reps < 2 {
            return Err(arg_err("bootstrap selection needs boot_reps >= 2"));
        }
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(arg_err("grid must be strictly ascending"));
        }
        ds.check_both_arms().map_err(lib_err)?;
        let all: Vec<usize> = (0..ds.w.cols()).collect();
        let nuis = NuisanceFits::fit(ds, &all).map_err(lib_err)?;
        let inputs = TargetingInputs::new(ds, &nuis).map_err(lib_err)?;
        let plan = GroupPlan {
            strategy,
            link,
            levels: grid.clone(),
            plugin: Vec::new(),
            tb: if source == VarianceSource::TBb {
                grid.clone()
            } else {
                Vec::new()
            },
            keep_path: false,
        };
        let key = StreamKey::new(mix64(seed ^ hash_bytes(b"estimate")), 0).child("tb");
        let levels = evaluate_group(&plan, &inputs, &nuis, key, boot_reps);
        let refs = grid_levels(&levels, &grid);
        let vars: Vec<f64> = refs.iter().map(|l| l.variance(source)).collect();
        let (sel, ci) =
            select_on_levels(&refs, &vars, source, ds.n(), brake_multiplier, LepskiCi::Source).map_err(lib_err)?;
        let stop = match sel.stop_reason {
            StopReason::LepskiStop => TmleStopReason::Lepski,
            StopReason::BrakeStop => TmleStopReason::Brake,
            StopReason::GridExhausted => TmleStopReason::Exhausted,
        };
        unsafe {
            *out = Box::into_raw(Box::new(TmleSelection {
                chosen_c: sel.chosen_c,
                psi: sel.chosen_psi,
                lower: ci.lower,
                upper: ci.upper,
                stop,
            }))
        };
        Ok(())
    })
}

/// Chosen constant, estimate, 95% interval and stop reason.
///
/// # Safety
/// `sel` must be a live selection handle; the out pointers must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn tmle_selection_get(
    sel: *const TmleSelection,
    chosen_c: *mut f64,
    psi: *mut f64,
    ci_lower: *mut f64,
    ci_upper: *mut f64,
    stop_reason: *mut TmleStopReason,
) -> TmleStatus {
    guard(|| {
        let s = unsafe { sel.as_ref() }.ok_or_else(|| null_err("selection"))?;
        if chosen_c.is_null() || psi.is_null() || ci_lower.is_null() || ci_upper.is_null() || stop_reason.is_null() {
            return Err(null_err("out"));
        }
        unsafe {
            *chosen_c = s.chosen_c;
            *psi = s.psi;
            *ci_lower = s.lower;
            *ci_upper = s.upper;
            *stop_reason = s.stop;
        }
        Ok(())
    })
}

/// # Safety
/// `sel` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tmle_selection_free(sel: *mut TmleSelection) {
    if !sel.is_null() {
        drop(unsafe { Box::from_raw(sel) });
    }
}
