//! C ABI over the `qkdf` engine.
//!
//! Every fallible function returns a [`QkdfStatus`]; on failure the message
//! is available from [`qkdf_last_error`] on the same thread. Bit arrays are
//! `uint8_t` buffers holding one 0/1 value per byte. Objects behind opaque
//! pointers are freed with their `*_free` function; strings returned by the
//! library are freed with [`qkdf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use qkdf::cascade::{reconcile_frame, CascadeConfig};
use qkdf::channel::{deadtime_efficiency, sample_tallies};
use qkdf::finitekey::{
    binary_entropy, estimate_decoy_bounds, secret_key_length, Basis, CellTally, Intensity, ObservedTallies,
};
use qkdf::optimizer::{optimize_params_with, OptimizerConfig};
use qkdf::pa::{pa_compress, PaConfig};
use qkdf::polar::{median_steps, monte_carlo, DriftModel, Scenario};
use qkdf::preset::{load_preset, ExperimentPreset};
use qkdf::session::{run_loopback, SessionConfig, SessionOutcome, SessionSeeds};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QkdfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// The inputs admit no positive secret key.
    NoKey = 3,
    /// Configuration could not be loaded or is inconsistent.
    Config = 4,
    /// A two-party run aborted.
    Protocol = 5,
    BufferTooSmall = 6,
    /// A Rust panic was caught at the boundary.
    Internal = 7,
}

/// A loaded experiment preset.
pub struct QkdfPreset(ExperimentPreset);

/// Result of a loopback session: both parties' outcomes.
pub struct QkdfSession {
    alice: SessionOutcome,
    bob: SessionOutcome,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct QkdfCell {
    pub sent: u64,
    pub detected: u64,
    pub errors: u64,
}

/// Per-basis tallies, each indexed `[signal, decoy]`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct QkdfTallies {
    pub z: [QkdfCell; 2],
    pub x: [QkdfCell; 2],
    pub duration_s: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct QkdfKeyResult {
    /// Set when the tallies are too thin for the decoy bounds; all other
    /// fields are then zero.
    pub infeasible: bool,
    pub s_z0_l: f64,
    pub s_z1_l: f64,
    pub s_x1_l: f64,
    pub v_x1_u: f64,
    pub phi_z_u: f64,
    pub secret_len: u64,
    pub skr: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct QkdfOptimum {
    pub skr: f64,
    pub p_z: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub p_mu1: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: QkdfStatus, msg: impl Into<String>) -> QkdfStatus {
    set_error(msg);
    status
}

/// Runs `f`, clearing the last error first and turning panics into
/// `Internal`.
fn guard<F: FnOnce() -> QkdfStatus>(f: F) -> QkdfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(QkdfStatus::Internal, format!("internal error: {msg}"))
        }
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(QkdfStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qkdf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call into the library from this thread.
#[no_mangle]
pub extern "C" fn qkdf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must come from this library and not be freed already. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn qkdf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a built-in preset, a preset from `QKDF_CONFIG_DIR`, or a `.toml`
/// file path.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qkdf_preset_load(name: *const c_char, out: *mut *mut QkdfPreset) -> QkdfStatus {
    guard(|| {
        non_null!(name, out);
        let Ok(name) = CStr::from_ptr(name).to_str() else {
            return fail(QkdfStatus::InvalidArgument, "name is not UTF-8");
        };
        match load_preset(name) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(QkdfPreset(p)));
                QkdfStatus::Ok
            }
            Err(e) => fail(QkdfStatus::Config, e.to_string()),
        }
    })
}

/// # Safety
/// `p` must come from [`qkdf_preset_load`]. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn qkdf_preset_free(p: *mut QkdfPreset) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Replaces the preset's total channel loss.
///
/// # Safety
/// `p` must be a live preset.
#[no_mangle]
pub unsafe extern "C" fn qkdf_preset_set_loss_db(p: *mut QkdfPreset, loss_db: f64) -> QkdfStatus {
    guard(|| {
        non_null!(p);
        let p = &mut (*p).0;
        let next = p.clone().with_loss_db(loss_db);
        if let Err(e) = next.validate() {
            return fail(QkdfStatus::InvalidArgument, e.to_string());
        }
        *p = next;
        QkdfStatus::Ok
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qkdf_binary_entropy(p: f64, out: *mut f64) -> QkdfStatus {
    guard(|| {
        non_null!(out);
        match binary_entropy(p) {
            Ok(h) => {
                *out = h;
                QkdfStatus::Ok
            }
            Err(e) => fail(QkdfStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Effective detection efficiency at `incident_rate` photons per second for
/// the preset's detector.
///
/// # Safety
/// `p` must be a live preset and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qkdf_deadtime_efficiency(p: *const QkdfPreset, incident_rate: f64, out: *mut f64) -> QkdfStatus {
    guard(|| {
        non_null!(p, out);
        if !(incident_rate > 0.0) {
            return fail(QkdfStatus::InvalidArgument, "incident_rate must be positive");
        }
        *out = deadtime_efficiency(incident_rate, &(*p).0.model);
        QkdfStatus::Ok
    })
}

/// Optimized protocol parameters and key rate at the preset's loss.
///
/// # Safety
/// `p` must be a live preset and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qkdf_optimize(p: *const QkdfPreset, out: *mut QkdfOptimum) -> QkdfStatus {
    guard(|| {
        non_null!(p, out);
        let p = &(*p).0;
        let cfg = OptimizerConfig {
            f_ec: p.runtime.f_ec,
            clock_hz: p.params.clock_hz,
            ..Default::default()
        };
        match optimize_params_with(&p.model, p.params.n_z_target, p.params.security, &cfg) {
            Ok(r) => {
                *out = QkdfOptimum {
                    skr: r.skr,
                    p_z: r.best_params.p_z,
                    mu1: r.best_params.mu1,
                    mu2: r.best_params.mu2,
                    p_mu1: r.best_params.p_mu1,
                };
                QkdfStatus::Ok
            }
            Err(e) => fail(QkdfStatus::NoKey, e.to_string()),
        }
    })
}

fn to_c(t: &ObservedTallies) -> QkdfTallies {
    let cell = |c: &CellTally| QkdfCell {
        sent: c.sent,
        detected: c.detected,
        errors: c.errors,
    };
    QkdfTallies {
        z: [cell(&t.z[0]), cell(&t.z[1])],
        x: [cell(&t.x[0]), cell(&t.x[1])],
        duration_s: t.duration_s,
    }
}

fn from_c(t: &QkdfTallies) -> ObservedTallies {
    let mut o = ObservedTallies {
        duration_s: t.duration_s,
        ..Default::default()
    };
    for (b, cells) in [(Basis::Z, &t.z), (Basis::X, &t.x)] {
        for k in Intensity::ALL {
            let c = cells[k.index()];
            *o.cell_mut(b, k) = CellTally {
                sent: c.sent,
                detected: c.detected,
                errors: c.errors,
            };
        }
    }
    o
}

/// Samples tallies for `duration_s` seconds of the preset's channel.
///
/// # Safety
/// `p` must be a live preset and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qkdf_sample_tallies(
    p: *const QkdfPreset,
    duration_s: f64,
    seed: u64,
    out: *mut QkdfTallies,
) -> QkdfStatus {
    guard(|| {
        non_null!(p, out);
        if !(duration_s > 0.0) {
            return fail(QkdfStatus::InvalidArgument, "duration_s must be positive");
        }
        let p = &(*p).0;
        *out = to_c(&sample_tallies(&p.model, &p.params, duration_s, seed));
        QkdfStatus::Ok
    })
}

/// Decoy bounds and secret-key length for `tallies` under the preset's
/// protocol parameters, with reconciliation efficiency `f`. Thin tallies set
/// `infeasible` and still return `Ok`.
///
/// # Safety
/// `p` must be a live preset, `tallies` readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qkdf_key_length(
    p: *const QkdfPreset,
    tallies: *const QkdfTallies,
    f: f64,
    out: *mut QkdfKeyResult,
) -> QkdfStatus {
    guard(|| {
        non_null!(p, tallies, out);
        if !(f >= 1.0) {
            return fail(QkdfStatus::InvalidArgument, "f must be at least 1");
        }
        let params = &(*p).0.params;
        let t = from_c(&*tallies);
        if let Err(e) = t.validate() {
            return fail(QkdfStatus::InvalidArgument, e.to_string());
        }
        *out = match estimate_decoy_bounds(&t, params) {
            Ok(b) => {
                let k = secret_key_length(&t, &b, f, params);
                QkdfKeyResult {
                    infeasible: false,
                    s_z0_l: b.s_z0_l,
                    s_z1_l: b.s_z1_l,
                    s_x1_l: b.s_x1_l,
                    v_x1_u: b.v_x1_u,
                    phi_z_u: b.phi_z_u,
                    secret_len: k.secret_len,
                    skr: k.skr,
                }
            }
            Err(e) => {
                set_error(e.to_string());
                QkdfKeyResult {
                    infeasible: true,
                    ..Default::default()
                }
            }
        };
        QkdfStatus::Ok
    })
}

unsafe fn bits<'a>(p: *const u8, len: usize) -> Result<&'a [u8], QkdfStatus> {
    let s = if len == 0 { &[][..] } else { slice::from_raw_parts(p, len) };
    if s.iter().any(|&b| b > 1) {
        return Err(fail(QkdfStatus::InvalidArgument, "bit arrays hold only 0 and 1"));
    }
    Ok(s)
}

/// Compresses `in_len` bits to `out_len` bits with the hash selected by
/// `seed`. `out` must hold `out_len` bytes.
///
/// # Safety
/// `input` must hold `in_len` bytes, `seed` 32 bytes, `out` `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn qkdf_pa_compress(
    input: *const u8,
    in_len: usize,
    out_len: usize,
    seed: *const u8,
    out: *mut u8,
) -> QkdfStatus {
    guard(|| {
        non_null!(input, seed, out);
        let input = match bits(input, in_len) {
            Ok(b) => b,
            Err(s) => return s,
        };
        let seed: &[u8; 32] = &*seed.cast();
        let r = PaConfig::for_input_len(in_len, 2, false).and_then(|cfg| pa_compress(input, out_len, seed, &cfg));
        match r {
            Ok(v) => {
                ptr::copy_nonoverlapping(v.as_ptr(), out, v.len());
                QkdfStatus::Ok
            }
            Err(e) => fail(QkdfStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Reconciles Bob's frame against Alice's in-process. On return `corrected`
/// holds Bob's key (unchanged when the CRC check failed), `disclosed` the
/// parity bits revealed and `crc_ok` the verification result.
///
/// # Safety
/// `alice`, `bob` and `corrected` must hold `len` bytes; `disclosed` and
/// `crc_ok` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qkdf_cascade_reconcile(
    alice: *const u8,
    bob: *const u8,
    len: usize,
    qber: f64,
    corrected: *mut u8,
    disclosed: *mut u64,
    crc_ok: *mut bool,
) -> QkdfStatus {
    guard(|| {
        non_null!(alice, bob, corrected, disclosed, crc_ok);
        let (a, b) = match (bits(alice, len), bits(bob, len)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        if !(0.0..0.5).contains(&qber) {
            return fail(QkdfStatus::InvalidArgument, "qber must be in [0, 0.5)");
        }
        let cfg = CascadeConfig {
            frame_bits: len.max(2),
            ..Default::default()
        };
        match reconcile_frame(a, b, qber, &cfg) {
            Ok((key, o)) => {
                ptr::copy_nonoverlapping(key.as_ptr(), corrected, len);
                *disclosed = o.disclosed_parities;
                *crc_ok = o.crc_ok;
                QkdfStatus::Ok
            }
            Err(e) => fail(QkdfStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Runs both parties of a simulated session over a localhost link.
/// `pulses == 0` uses the preset's session length. An empty secret key is
/// not an error; check [`qkdf_session_secret_len`].
///
/// # Safety
/// `p` must be a live preset and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qkdf_session_loopback(
    p: *const QkdfPreset,
    pulses: u64,
    seed: u64,
    out: *mut *mut QkdfSession,
) -> QkdfStatus {
    guard(|| {
        non_null!(p, out);
        let p = &(*p).0;
        let n = if pulses == 0 { p.runtime.session_pulses } else { pulses };
        let mut cfg = SessionConfig::new(p.model, p.params, n);
        cfg.calibration_period = Some(p.runtime.calibration_period);
        cfg.seeds = SessionSeeds {
            alice: seed,
            channel: seed.wrapping_add(1),
            bob: seed.wrapping_add(2),
        };
        match run_loopback(&cfg) {
            Ok((alice, bob)) => {
                *out = Box::into_raw(Box::new(QkdfSession { alice, bob }));
                QkdfStatus::Ok
            }
            Err(e) if e.is_config() => fail(QkdfStatus::Config, e.to_string()),
            Err(e) => fail(QkdfStatus::Protocol, e.to_string()),
        }
    })
}

/// # Safety
/// `s` must come from [`qkdf_session_loopback`]. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn qkdf_session_free(s: *mut QkdfSession) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Secret key length in bits, or 0 for a NULL session.
///
/// # Safety
/// `s` must be a live session or NULL.
#[no_mangle]
pub unsafe extern "C" fn qkdf_session_secret_len(s: *const QkdfSession) -> u64 {
    if s.is_null() {
        return 0;
    }
    (*s).bob.key.len() as u64
}

/// Copies a party's secret key (`party` 0 for Alice, 1 for Bob) into `buf`.
///
/// # Safety
/// `s` must be a live session and `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn qkdf_session_copy_key(
    s: *const QkdfSession,
    party: u32,
    buf: *mut u8,
    cap: usize,
) -> QkdfStatus {
    guard(|| {
        non_null!(s, buf);
        let key = match party {
            0 => (*s).alice.key.bits(),
            1 => (*s).bob.key.bits(),
            _ => return fail(QkdfStatus::InvalidArgument, "party must be 0 or 1"),
        };
        if cap < key.len() {
            return fail(QkdfStatus::BufferTooSmall, format!("key needs {} bytes", key.len()));
        }
        ptr::copy_nonoverlapping(key.as_ptr(), buf, key.len());
        QkdfStatus::Ok
    })
}

/// Bob's session report as JSON, or NULL on failure. Free with
/// [`qkdf_string_free`].
///
/// # Safety
/// `s` must be a live session or NULL.
#[no_mangle]
pub unsafe extern "C" fn qkdf_session_report_json(s: *const QkdfSession) -> *mut c_char {
    if s.is_null() {
        set_error("s is null");
        return ptr::null_mut();
    }
    match serde_json::to_string(&(*s).bob.report) {
        Ok(j) => CString::new(j).map_or(ptr::null_mut(), CString::into_raw),
        Err(e) => {
            set_error(e.to_string());
            ptr::null_mut()
        }
    }
}

/// Runs `trials` seeded polarization-compensation trials from a random
/// misalignment without drift. Writes the number that converged and the
/// median steps to convergence (-1 when the median run did not converge).
///
/// # Safety
/// `p` must be a live preset; `converged` and `median` writable.
#[no_mangle]
pub unsafe extern "C" fn qkdf_polar_trials(
    p: *const QkdfPreset,
    strong_pulses: bool,
    trials: u64,
    seed: u64,
    converged: *mut u64,
    median: *mut i64,
) -> QkdfStatus {
    guard(|| {
        non_null!(p, converged, median);
        let mut sc = Scenario::from_preset(&(*p).0, DriftModel::NONE);
        sc.strong_pulses = strong_pulses;
        sc.seed = seed;
        match monte_carlo(&sc, trials) {
            Ok(steps) => {
                *converged = steps.iter().filter(|s| s.is_some()).count() as u64;
                *median = median_steps(&steps).map_or(-1, |m| m as i64);
                QkdfStatus::Ok
            }
            Err(e) => fail(QkdfStatus::InvalidArgument, e.to_string()),
        }
    })
}
