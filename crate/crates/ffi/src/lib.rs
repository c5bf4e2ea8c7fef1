//! C ABI over the uswipt simulator.
//!
//! Every handle is an opaque heap object owned by the caller and released
//! with its `_free` function. Every fallible call returns a [`UswStatus`] and
//! writes its result through an out-pointer; on failure, [`usw_last_error`]
//! describes the most recent error on the calling thread. No panic crosses
//! the boundary.
//!
//! Pointer arguments must be null or valid for the access the function
//! performs; handles must come from this library and not be used after free.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uswipt::analysis::{self, Branch, CdfQuery, Mode, Scenario};
use uswipt::harvest::{self, EhCurve};
use uswipt::neuralnet::TcnModel;
use uswipt::units::dbm_to_watts;

/// Single-tone transmission mode (`rho = rho_fs`).
pub const USW_MODE_SINGLE: u32 = 0;
/// Multi-tone transmission mode (`rho = 0`).
pub const USW_MODE_MULTI: u32 = 1;
/// Power-splitting (DC-coupled) receiver branch.
pub const USW_BRANCH_PS: u32 = 0;
/// Frequency-splitting (DC-removed) receiver branch.
pub const USW_BRANCH_FS: u32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UswStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    Io = 4,
    Data = 5,
    Panic = 6,
}

/// Link parameters: signal, HPA, receiver and channel.
pub struct UswScenario(Scenario);

/// Piecewise-linear energy-harvesting curve for one tone count.
pub struct UswEhCurve(EhCurve);

/// Trained temporal convolutional network.
pub struct UswTcn(TcnModel);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    // Interior NULs cannot occur in our messages, but never fail here.
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(UswStatus, String);

impl From<uswipt::Error> for Fail {
    fn from(e: uswipt::Error) -> Self {
        use uswipt::Error as E;
        let status = match &e {
            E::InvalidParameter(_) | E::Config { .. } => UswStatus::InvalidArgument,
            E::Degenerate(_) | E::Quadrature(_) | E::Numerical(_) => UswStatus::Numerical,
            E::Io(_) => UswStatus::Io,
            E::Data(_) | E::Csv(_) | E::Json(_) => UswStatus::Data,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(UswStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(UswStatus::InvalidArgument, msg.into())
}

/// Run `f`, translating errors and panics into a status.
fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> UswStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            UswStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            UswStatus::Panic
        }
    }
}

unsafe fn put<T>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(v);
    Ok(())
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn get_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn mode(m: u32) -> Result<Mode, Fail> {
    match m {
        USW_MODE_SINGLE => Ok(Mode::SingleTone),
        USW_MODE_MULTI => Ok(Mode::MultiTone),
        _ => Err(invalid(format!("unknown mode {m}"))),
    }
}

fn branch(b: u32) -> Result<Branch, Fail> {
    match b {
        USW_BRANCH_PS => Ok(Branch::Ps),
        USW_BRANCH_FS => Ok(Branch::Fs),
        _ => Err(invalid(format!("unknown branch {b}"))),
    }
}

/// Message for the last failed call on this thread, or an empty string.
///
/// The pointer stays valid until the next `usw_` call on the same thread.
#[no_mangle]
pub extern "C" fn usw_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Default link scenario. Release with `usw_scenario_free`.
#[no_mangle]
pub unsafe extern "C" fn usw_scenario_new(out: *mut *mut UswScenario) -> UswStatus {
    guard(|| put(out, Box::into_raw(Box::new(UswScenario(Scenario::default())))))
}

#[no_mangle]
pub unsafe extern "C" fn usw_scenario_free(s: *mut UswScenario) {
    if !s.is_null() {
        let _ = catch_unwind(|| drop(Box::from_raw(s)));
    }
}

/// HPA drive power in dBm.
#[no_mangle]
pub unsafe extern "C" fn usw_scenario_set_drive_dbm(s: *mut UswScenario, p_dr_dbm: f64) -> UswStatus {
    guard(|| {
        if !p_dr_dbm.is_finite() {
            return Err(invalid("drive power must be finite"));
        }
        get_mut(s, "scenario")?.0.signal.p_dr = dbm_to_watts(p_dr_dbm);
        Ok(())
    })
}

/// Carrier allocation used in single-tone mode, in `[0, 1]`.
#[no_mangle]
pub unsafe extern "C" fn usw_scenario_set_rho_fs(s: *mut UswScenario, rho_fs: f64) -> UswStatus {
    guard(|| {
        if !(0.0..=1.0).contains(&rho_fs) {
            return Err(invalid(format!("rho_fs = {rho_fs} outside [0, 1]")));
        }
        get_mut(s, "scenario")?.0.signal.rho_fs = rho_fs;
        Ok(())
    })
}

/// Receiver noise power of both branches, in dBm.
#[no_mangle]
pub unsafe extern "C" fn usw_scenario_set_noise_dbm(s: *mut UswScenario, sigma_dbm: f64) -> UswStatus {
    guard(|| {
        if !sigma_dbm.is_finite() {
            return Err(invalid("noise power must be finite"));
        }
        let r = &mut get_mut(s, "scenario")?.0.receiver;
        r.sigma_ps_sq = dbm_to_watts(sigma_dbm);
        r.sigma_fs_sq = r.sigma_ps_sq;
        Ok(())
    })
}

/// Fading-averaged symbol error rate of a uniformly drawn symbol.
#[no_mangle]
pub unsafe extern "C" fn usw_ser_analytical(s: *const UswScenario, mode_id: u32, q: usize, out: *mut f64) -> UswStatus {
    guard(|| {
        let s = &get(s, "scenario")?.0;
        let rho = mode(mode_id)?.rho(s.signal.rho_fs);
        put(out, analysis::ser_analytical(rho, q, s)?)
    })
}

/// Symbol error rate at a fixed channel magnitude.
#[no_mangle]
pub unsafe extern "C" fn usw_ser_conditional(
    s: *const UswScenario,
    mode_id: u32,
    q: usize,
    h_mag: f64,
    out: *mut f64,
) -> UswStatus {
    guard(|| {
        let s = &get(s, "scenario")?.0;
        if !(h_mag >= 0.0 && h_mag.is_finite()) {
            return Err(invalid("channel magnitude must be finite and nonnegative"));
        }
        let rho = mode(mode_id)?.rho(s.signal.rho_fs);
        put(out, analysis::ser_conditional(rho, q, s, h_mag)?)
    })
}

/// Rayleigh-averaged CDF of the branch PAPR estimate of symbol `n` out of `q`.
#[no_mangle]
pub unsafe extern "C" fn usw_papr_cdf(
    s: *const UswScenario,
    mode_id: u32,
    branch_id: u32,
    q: usize,
    n: usize,
    gamma: f64,
    out: *mut f64,
) -> UswStatus {
    guard(|| {
        let mut sc = get(s, "scenario")?.0.clone();
        sc.signal.q_total = q;
        sc.signal.n_active = n;
        sc.signal.rho = mode(mode_id)?.rho(sc.signal.rho_fs);
        let query = CdfQuery {
            gamma,
            n_active: n,
            branch: branch(branch_id)?,
            scenario: sc,
        };
        put(out, analysis::papr_cdf_rayleigh(&query)?)
    })
}

/// Fraction of `blocks` correlated fading blocks whose conditional SER exceeds `ser_tag`.
#[no_mangle]
pub unsafe extern "C" fn usw_outage_probability(
    s: *const UswScenario,
    mode_id: u32,
    q: usize,
    ser_tag: f64,
    blocks: usize,
    seed: u64,
    out: *mut f64,
) -> UswStatus {
    guard(|| {
        let s = &get(s, "scenario")?.0;
        let rho = mode(mode_id)?.rho(s.signal.rho_fs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        put(out, analysis::outage_probability(rho, q, s, ser_tag, blocks, &mut rng)?)
    })
}

/// Marcum Q function of order one half.
#[no_mangle]
pub unsafe extern "C" fn usw_marcum_q_half(a: f64, b: f64, out: *mut f64) -> UswStatus {
    guard(|| put(out, analysis::marcum_q_half(a, b)?))
}

/// Curve through `len` knots `(x[i], y[i])` in watts, starting at output 0.
#[no_mangle]
pub unsafe extern "C" fn usw_eh_curve_new(
    q: usize,
    x: *const f64,
    y: *const f64,
    len: usize,
    out: *mut *mut UswEhCurve,
) -> UswStatus {
    guard(|| {
        let c = EhCurve::new(q, slice(x, len, "x")?.to_vec(), slice(y, len, "y")?.to_vec())?;
        put(out, Box::into_raw(Box::new(UswEhCurve(c))))
    })
}

/// Least-squares piecewise-linear fit to measured `(p_in, p_eh)` pairs in watts.
#[no_mangle]
pub unsafe extern "C" fn usw_eh_curve_fit(
    q: usize,
    p_in: *const f64,
    p_eh: *const f64,
    len: usize,
    segments: usize,
    out: *mut *mut UswEhCurve,
) -> UswStatus {
    guard(|| {
        let data: Vec<(f64, f64)> = slice(p_in, len, "p_in")?
            .iter()
            .copied()
            .zip(slice(p_eh, len, "p_eh")?.iter().copied())
            .collect();
        let c = harvest::fit_piecewise(q, &data, segments)?;
        put(out, Box::into_raw(Box::new(UswEhCurve(c))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn usw_eh_curve_free(c: *mut UswEhCurve) {
    if !c.is_null() {
        let _ = catch_unwind(|| drop(Box::from_raw(c)));
    }
}

/// Harvested DC power in watts for an RF input of `p_in` watts.
#[no_mangle]
pub unsafe extern "C" fn usw_eh_harvested(c: *const UswEhCurve, p_in: f64, out: *mut f64) -> UswStatus {
    guard(|| {
        let c = &get(c, "curve")?.0;
        if p_in.is_nan() || p_in < 0.0 {
            return Err(invalid("input power must be nonnegative"));
        }
        put(out, harvest::harvested_power(c, p_in))
    })
}

/// Input power in watts where the two curves' conversion efficiencies cross.
#[no_mangle]
pub unsafe extern "C" fn usw_eh_crossover(
    single: *const UswEhCurve,
    multi: *const UswEhCurve,
    out: *mut f64,
) -> UswStatus {
    guard(|| {
        let s = &get(single, "single-tone curve")?.0;
        let m = &get(multi, "multi-tone curve")?.0;
        put(out, harvest::pce_crossover(s, m)?)
    })
}

/// Load a JSON checkpoint written by `uswipt train-tcn`.
#[no_mangle]
pub unsafe extern "C" fn usw_tcn_load(path: *const c_char, out: *mut *mut UswTcn) -> UswStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let m = TcnModel::load_json(std::path::Path::new(path))?;
        put(out, Box::into_raw(Box::new(UswTcn(m))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn usw_tcn_free(m: *mut UswTcn) {
    if !m.is_null() {
        let _ = catch_unwind(|| drop(Box::from_raw(m)));
    }
}

/// Number of doubles `usw_tcn_predict` expects: window times feature count.
#[no_mangle]
pub unsafe extern "C" fn usw_tcn_input_len(m: *const UswTcn, out: *mut usize) -> UswStatus {
    guard(|| {
        let c = &get(m, "model")?.0.config;
        put(out, c.window * c.input_features)
    })
}

/// Prediction at the last step of a time-major window of raw features.
#[no_mangle]
pub unsafe extern "C" fn usw_tcn_predict(m: *const UswTcn, window: *const f64, len: usize, out: *mut f64) -> UswStatus {
    guard(|| {
        let m = &get(m, "model")?.0;
        let want = m.config.window * m.config.input_features;
        if len != want {
            return Err(invalid(format!("window has {len} values, model needs {want}")));
        }
        put(out, m.predict(slice(window, len, "window")?))
    })
}
