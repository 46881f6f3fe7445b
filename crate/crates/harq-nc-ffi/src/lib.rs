//! C ABI over the harq-nc simulation library.
//!
//! Scenarios travel as opaque handles; results come back as
//! caller-freed C strings (CSV or JSON, matching the CLI's file formats).
//! Every function returns a status code; the per-thread message from the
//! last failure is available via [`harq_nc_last_error_message`]. Panics
//! are caught at the boundary and surface as `HARQ_NC_STATUS_PANIC`.
//!
//! Typical call sequence:
//!
//! ```c
//! HarqScenario *sc = NULL;
//! if (harq_nc_scenario_load_file("pendulum.json", &sc) != HARQ_NC_STATUS_OK) { ... }
//! char *summary = NULL;
//! if (harq_nc_monte_carlo_json(sc, 0, &summary) == HARQ_NC_STATUS_OK) {
//!     puts(summary);
//!     harq_nc_string_free(summary);
//! }
//! harq_nc_scenario_free(sc);
//! ```

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use harq_nc::model::{parse_scenario, validate_scenario, Policy, ScenarioConfig};
use harq_nc::sim::{
    write_gains_csv, write_summary_json, write_trace_csv, write_trace_json, FileMeta, Simulator,
};
use harq_nc::Error;

/// Status codes returned by every fallible entry point.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HarqNcStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = -1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = -2,
    /// The scenario document could not be read or parsed.
    ParseError = -3,
    /// The scenario violates the data-model invariants.
    ValidationError = -4,
    /// The operation is not supported for this scenario.
    Unsupported = -5,
    /// A runtime or numerical failure occurred.
    RuntimeError = -6,
    /// A panic was caught at the FFI boundary.
    Panic = -7,
}

/// Opaque scenario handle.
pub struct HarqScenario {
    inner: ScenarioConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', "?"))
        .unwrap_or_else(|_| CString::new("invalid error message").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> HarqNcStatus {
    match err {
        Error::Parse(_) => HarqNcStatus::ParseError,
        Error::Validation(_) => HarqNcStatus::ValidationError,
        Error::Unsupported(_) => HarqNcStatus::Unsupported,
        _ => HarqNcStatus::RuntimeError,
    }
}

fn fail(err: Error) -> HarqNcStatus {
    let status = status_of(&err);
    set_last_error(err.to_string());
    status
}

/// Run `f` with panics converted into a status code.
fn guarded(f: impl FnOnce() -> HarqNcStatus) -> HarqNcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic across FFI boundary".to_string());
            set_last_error(msg);
            HarqNcStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for reads.
unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, HarqNcStatus> {
    if ptr.is_null() {
        set_last_error("null string argument".into());
        return Err(HarqNcStatus::NullArgument);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_last_error("string argument is not valid UTF-8".into());
        HarqNcStatus::InvalidUtf8
    })
}

fn emit_string(out: *mut *mut c_char, text: String) -> HarqNcStatus {
    if out.is_null() {
        set_last_error("null output pointer".into());
        return HarqNcStatus::NullArgument;
    }
    match CString::new(text) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            HarqNcStatus::Ok
        }
        Err(_) => {
            set_last_error("output contained an interior NUL byte".into());
            HarqNcStatus::RuntimeError
        }
    }
}

/// Library version as a static string (do not free).
#[no_mangle]
pub extern "C" fn harq_nc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message from the most recent failure on this thread, or null. The
/// caller owns the returned string and must release it with
/// [`harq_nc_string_free`].
#[no_mangle]
pub extern "C" fn harq_nc_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(c) => c.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer previously returned by one of the
/// string-producing functions here, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn harq_nc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

fn load_into(out: *mut *mut HarqScenario, cfg: ScenarioConfig) -> HarqNcStatus {
    if out.is_null() {
        set_last_error("null output pointer".into());
        return HarqNcStatus::NullArgument;
    }
    let handle = Box::new(HarqScenario { inner: cfg });
    unsafe { *out = Box::into_raw(handle) };
    HarqNcStatus::Ok
}

/// Load and validate a scenario document from a file path.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn harq_nc_scenario_load_file(
    path: *const c_char,
    out: *mut *mut HarqScenario,
) -> HarqNcStatus {
    guarded(|| {
        let path = match unsafe { read_str(path) } {
            Ok(s) => s,
            Err(status) => return status,
        };
        match harq_nc::model::load_scenario(path) {
            Ok(cfg) => load_into(out, cfg),
            Err(e) => fail(e),
        }
    })
}

/// Parse and validate a scenario document from a JSON string.
///
/// # Safety
/// `json` must be a valid NUL-terminated string; `out` must be a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn harq_nc_scenario_load_json(
    json: *const c_char,
    out: *mut *mut HarqScenario,
) -> HarqNcStatus {
    guarded(|| {
        let json = match unsafe { read_str(json) } {
            Ok(s) => s,
            Err(status) => return status,
        };
        match parse_scenario(json) {
            Ok(cfg) => load_into(out, cfg),
            Err(e) => fail(e),
        }
    })
}

/// Release a scenario handle.
///
/// # Safety
/// `scenario` must be null or a handle from a load function, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn harq_nc_scenario_free(scenario: *mut HarqScenario) {
    if !scenario.is_null() {
        drop(unsafe { Box::from_raw(scenario) });
    }
}

/// # Safety
/// `scenario` must be a live handle.
unsafe fn scenario_ref<'a>(
    scenario: *const HarqScenario,
) -> Result<&'a ScenarioConfig, HarqNcStatus> {
    if scenario.is_null() {
        set_last_error("null scenario handle".into());
        return Err(HarqNcStatus::NullArgument);
    }
    Ok(&unsafe { &*scenario }.inner)
}

/// Override the scenario seed.
///
/// # Safety
/// `scenario` must be a live handle from a load function.
#[no_mangle]
pub unsafe extern "C" fn harq_nc_scenario_set_seed(
    scenario: *mut HarqScenario,
    seed: u64,
) -> HarqNcStatus {
    guarded(|| {
        if scenario.is_null() {
            set_last_error("null scenario handle".into());
            return HarqNcStatus::NullArgument;
        }
        unsafe { &mut *scenario }.inner.seed = seed;
        HarqNcStatus::Ok
    })
}

/// Override the Monte Carlo run count (must be >= 1).
///
/// # Safety
/// `scenario` must be a live handle from a load function.
#[no_mangle]
pub unsafe extern "C" fn harq_nc_scenario_set_runs(
    scenario: *mut HarqScenario,
    runs: u64,
) -> HarqNcStatus {
    guarded(|| {
        if scenario.is_null() {
            set_last_error("null scenario handle".into());
            return HarqNcStatus::NullArgument;
        }
        if runs < 1 {
            set_last_error("runs must be >= 1".into());
            return HarqNcStatus::ValidationError;
        }
        unsafe { &mut *scenario }.inner.runs = runs as usize;
        HarqNcStatus::Ok
    })
}

/// Override the switching policy, e.g. "harq_optimal", "always_tx",
/// "random(0.3)", "age_threshold(2)".
///
/// # Safety
/// `scenario` must be a live handle; `policy` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn harq_nc_scenario_set_policy(
    scenario: *mut HarqScenario,
    policy: *const c_char,
) -> HarqNcStatus {
    guarded(|| {
        if scenario.is_null() {
            set_last_error("null scenario handle".into());
            return HarqNcStatus::NullArgument;
        }
        let name = match unsafe { read_str(policy) } {
            Ok(s) => s,
            Err(status) => return status,
        };
        match name.parse::<Policy>() {
            Ok(p) => {
                unsafe { &mut *scenario }.inner.policy = p;
                HarqNcStatus::Ok
            }
            Err(msg) => {
                set_last_error(msg);
                HarqNcStatus::ParseError
            }
        }
    })
}

/// Validate the scenario. Returns the number of violations (0 when clean)
/// or a negative status code; `out_json`, when non-null, receives a JSON
/// array of `{field, rule}` objects.
///
/// # Safety
/// `scenario` must be a live handle; `out_json` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn harq_nc_scenario_validate(
    scenario: *const HarqScenario,
    out_json: *mut *mut c_char,
) -> i32 {
    let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<i32, HarqNcStatus> {
        let cfg = unsafe { scenario_ref(scenario) }?;
        let violations = validate_scenario(cfg);
        if !out_json.is_null() {
            let json = serde_json::to_string(&violations).expect("serializable");
            let status = emit_string(out_json, json);
            if status != HarqNcStatus::Ok {
                return Err(status);
            }
        }
        Ok(violations.len() as i32)
    }));
    match outcome {
        Ok(Ok(count)) => count,
        Ok(Err(status)) => status as i32,
        Err(_) => {
            set_last_error("panic across FFI boundary".into());
            HarqNcStatus::Panic as i32
        }
    }
}

/// SHA-256 of the canonical scenario document, hex-encoded.
///
/// # Safety
/// `scenario` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn harq_nc_scenario_hash(
    scenario: *const HarqScenario,
    out: *mut *mut c_char,
) -> HarqNcStatus {
    guarded(|| {
        let cfg = match unsafe { scenario_ref(scenario) } {
            Ok(c) => c,
            Err(status) => return status,
        };
        emit_string(out, cfg.sha256())
    })
}

fn run_trace(cfg: &ScenarioConfig, run_index: u64, json: bool) -> Result<String, Error> {
    let sim = Simulator::new(cfg)?;
    let trace = sim.run_episode(run_index)?;
    let meta = FileMeta::for_config(cfg);
    let mut buf = Vec::new();
    if json {
        write_trace_json(&trace, &meta, &mut buf)?;
    } else {
        write_trace_csv(&trace, &meta, &mut buf)?;
    }
    Ok(String::from_utf8(buf).expect("emitters produce UTF-8"))
}

/// Run one episode and return its trace as CSV (same layout as the CLI).
///
/// # Safety
/// `scenario` must be a live handle; `out_csv` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn harq_nc_run_episode_csv(
    scenario: *const HarqScenario,
    run_index: u64,
    out_csv: *mut *mut c_char,
) -> HarqNcStatus {
    guarded(|| {
        let cfg = match unsafe { scenario_ref(scenario) } {
            Ok(c) => c,
            Err(status) => return status,
        };
        match run_trace(cfg, run_index, false) {
            Ok(text) => emit_string(out_csv, text),
            Err(e) => fail(e),
        }
    })
}

/// Run one episode and return its trace as a JSON document.
///
/// # Safety
/// `scenario` must be a live handle; `out_json` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn harq_nc_run_episode_json(
    scenario: *const HarqScenario,
    run_index: u64,
    out_json: *mut *mut c_char,
) -> HarqNcStatus {
    guarded(|| {
        let cfg = match unsafe { scenario_ref(scenario) } {
            Ok(c) => c,
            Err(status) => return status,
        };
        match run_trace(cfg, run_index, true) {
            Ok(text) => emit_string(out_json, text),
            Err(e) => fail(e),
        }
    })
}

/// Monte Carlo sweep over the scenario's run count; the summary comes back
/// as a JSON document. `workers` = 0 uses all cores; results are identical
/// for every worker count.
///
/// # Safety
/// `scenario` must be a live handle; `out_json` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn harq_nc_monte_carlo_json(
    scenario: *const HarqScenario,
    workers: i32,
    out_json: *mut *mut c_char,
) -> HarqNcStatus {
    guarded(|| {
        let cfg = match unsafe { scenario_ref(scenario) } {
            Ok(c) => c,
            Err(status) => return status,
        };
        let work = || -> Result<String, Error> {
            let sim = Simulator::new(cfg)?;
            let mut summary = sim.monte_carlo()?;
            summary.per_run_upsilon.clear();
            let meta = FileMeta::for_config(cfg);
            let mut buf = Vec::new();
            write_summary_json(&[summary], &[], &meta, &mut buf)?;
            Ok(String::from_utf8(buf).expect("emitters produce UTF-8"))
        };
        let result = if workers > 0 {
            match rayon::ThreadPoolBuilder::new()
                .num_threads(workers as usize)
                .build()
            {
                Ok(pool) => pool.install(work),
                Err(e) => Err(Error::Unsupported(format!("worker pool: {e}"))),
            }
        } else {
            work()
        };
        match result {
            Ok(text) => emit_string(out_json, text),
            Err(e) => fail(e),
        }
    })
}

/// Riccati cost-to-go and gain schedules as CSV.
///
/// # Safety
/// `scenario` must be a live handle; `out_csv` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn harq_nc_gains_csv(
    scenario: *const HarqScenario,
    out_csv: *mut *mut c_char,
) -> HarqNcStatus {
    guarded(|| {
        let cfg = match unsafe { scenario_ref(scenario) } {
            Ok(c) => c,
            Err(status) => return status,
        };
        let work = || -> Result<String, Error> {
            let sim = Simulator::new(cfg)?;
            let meta = FileMeta::for_config(cfg);
            let mut buf = Vec::new();
            write_gains_csv(sim.gains(), cfg, &meta, &mut buf)?;
            Ok(String::from_utf8(buf).expect("emitters produce UTF-8"))
        };
        match work() {
            Ok(text) => emit_string(out_csv, text),
            Err(e) => fail(e),
        }
    })
}
