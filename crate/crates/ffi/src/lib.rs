//! C ABI over the driftcfl simulator.
//!
//! Every function returns a [`DcflStatus`]; results come back through out
//! pointers. On failure the message is kept per thread and can be fetched
//! with [`dcfl_last_error`]. Strings handed out by this library must be
//! released with [`dcfl_string_free`], engines with [`dcfl_engine_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use libc::{c_char, size_t};

use driftcfl::clustering::choose_k;
use driftcfl::config::ExperimentConfig;
use driftcfl::engine::Engine;
use driftcfl::models::Sample;
use driftcfl::representations::{compute_label_histogram, ClientId, Metric};
use driftcfl::theory::{verify_theory, TheoryConfig};
use driftcfl::Error;

pub const DCFL_METRIC_L1: u32 = 0;
pub const DCFL_METRIC_JENSEN_SHANNON: u32 = 1;
pub const DCFL_METRIC_SQUARED_EUCLIDEAN: u32 = 2;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DcflStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// The config or theory parameters failed validation.
    Validation = 3,
    /// Simulation, clustering or I/O failure.
    Runtime = 4,
    /// The theory checks ran but at least one bound was violated.
    TheoryFailed = 5,
    Panic = 6,
}

/// Opaque simulator handle.
pub struct DcflEngine {
    inner: Engine,
}

/// One evaluated training round.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct DcflRound {
    pub round: u64,
    pub mean_accuracy: f64,
    pub mean_client_distance: f64,
    pub baseline_distance: f64,
    pub num_clusters: size_t,
    pub recluster_triggered: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: DcflStatus, msg: impl Into<String>) -> DcflStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> DcflStatus {
    let status = match e {
        Error::Config(_) | Error::TomlDe(_) | Error::TheorySetup(_) => DcflStatus::Validation,
        Error::InvalidInput(_) | Error::DimensionMismatch { .. } | Error::KindMismatch(..) => DcflStatus::InvalidArgument,
        _ => DcflStatus::Runtime,
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into [`DcflStatus::Panic`].
fn guard(f: impl FnOnce() -> DcflStatus) -> DcflStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(DcflStatus::Panic, msg)
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, DcflStatus> {
    if p.is_null() {
        return Err(fail(DcflStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DcflStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn metric_of(code: u32) -> Result<Metric, DcflStatus> {
    match code {
        DCFL_METRIC_L1 => Ok(Metric::L1),
        DCFL_METRIC_JENSEN_SHANNON => Ok(Metric::JensenShannon),
        DCFL_METRIC_SQUARED_EUCLIDEAN => Ok(Metric::SquaredEuclidean),
        _ => Err(fail(DcflStatus::InvalidArgument, format!("unknown metric code {code}"))),
    }
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(DcflStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

/// Copy of the calling thread's last error message, or NULL when the last
/// call succeeded. Free with [`dcfl_string_free`].
#[no_mangle]
pub extern "C" fn dcfl_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |s| s.clone().into_raw()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dcfl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds an in-memory engine from TOML config text.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcfl_engine_new(config_toml: *const c_char, out: *mut *mut DcflEngine) -> DcflStatus {
    guard(|| {
        non_null!(out);
        let text = try_status!(read_str(config_toml, "config_toml"));
        let cfg = try_status!(ExperimentConfig::from_toml_str(text).map_err(from_error));
        let engine = try_status!(Engine::new(cfg).map_err(from_error));
        *out = Box::into_raw(Box::new(DcflEngine { inner: engine }));
        DcflStatus::Ok
    })
}

/// Like [`dcfl_engine_new`] but writes rounds, events and checkpoints
/// under `run_dir`.
///
/// # Safety
/// Both strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcfl_engine_new_with_output(
    config_toml: *const c_char,
    run_dir: *const c_char,
    out: *mut *mut DcflEngine,
) -> DcflStatus {
    guard(|| {
        non_null!(out);
        let text = try_status!(read_str(config_toml, "config_toml"));
        let dir = try_status!(read_str(run_dir, "run_dir"));
        let cfg = try_status!(ExperimentConfig::from_toml_str(text).map_err(from_error));
        let engine = try_status!(Engine::with_output(cfg, Path::new(dir)).map_err(from_error));
        *out = Box::into_raw(Box::new(DcflEngine { inner: engine }));
        DcflStatus::Ok
    })
}

/// Reopens a run directory at its latest checkpoint.
///
/// # Safety
/// `run_dir` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcfl_engine_resume(run_dir: *const c_char, out: *mut *mut DcflEngine) -> DcflStatus {
    guard(|| {
        non_null!(out);
        let dir = try_status!(read_str(run_dir, "run_dir"));
        let engine = try_status!(Engine::resume(Path::new(dir)).map_err(from_error));
        *out = Box::into_raw(Box::new(DcflEngine { inner: engine }));
        DcflStatus::Ok
    })
}

/// # Safety
/// `engine` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dcfl_engine_free(engine: *mut DcflEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Advances one round. `*has_round` is false once the run is finished, in
/// which case `*out` is left untouched.
///
/// # Safety
/// `engine` must be a live handle; `out` and `has_round` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcfl_engine_step_round(engine: *mut DcflEngine, out: *mut DcflRound, has_round: *mut bool) -> DcflStatus {
    guard(|| {
        non_null!(engine, out, has_round);
        let e = &mut (*engine).inner;
        match try_status!(e.step_round().map_err(from_error)) {
            Some(r) => {
                *out = DcflRound {
                    round: r.round,
                    mean_accuracy: r.mean_accuracy,
                    mean_client_distance: r.mean_client_distance,
                    baseline_distance: r.baseline_distance,
                    num_clusters: r.k,
                    recluster_triggered: r.recluster_triggered,
                };
                *has_round = true;
            }
            None => *has_round = false,
        }
        DcflStatus::Ok
    })
}

/// Runs the remaining rounds and reports the final mean accuracy.
///
/// # Safety
/// `engine` must be a live handle; `final_accuracy` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcfl_engine_run(engine: *mut DcflEngine, final_accuracy: *mut f64) -> DcflStatus {
    guard(|| {
        non_null!(engine, final_accuracy);
        let summary = try_status!((*engine).inner.run().map_err(from_error));
        *final_accuracy = summary.final_mean_accuracy;
        DcflStatus::Ok
    })
}

/// # Safety
/// `engine` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcfl_engine_num_clusters(engine: *const DcflEngine, out: *mut size_t) -> DcflStatus {
    guard(|| {
        non_null!(engine, out);
        *out = (*engine).inner.num_clusters();
        DcflStatus::Ok
    })
}

/// Cluster index of `client`; `InvalidArgument` when it is not clustered.
///
/// # Safety
/// `engine` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcfl_engine_cluster_of(engine: *const DcflEngine, client: u32, out: *mut size_t) -> DcflStatus {
    guard(|| {
        non_null!(engine, out);
        match (*engine).inner.cluster_of(client as ClientId) {
            Some(k) => {
                *out = k;
                DcflStatus::Ok
            }
            None => fail(DcflStatus::InvalidArgument, format!("client {client} is not clustered")),
        }
    })
}

/// Number of parameters of every cluster model.
///
/// # Safety
/// `engine` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcfl_engine_model_dim(engine: *const DcflEngine, out: *mut size_t) -> DcflStatus {
    guard(|| {
        non_null!(engine, out);
        *out = (*engine).inner.config().task_model().dim();
        DcflStatus::Ok
    })
}

/// Copies cluster `k`'s parameters into `buf`, which holds `len` doubles
/// and must be exactly the model dimension.
///
/// # Safety
/// `engine` must be a live handle; `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dcfl_engine_copy_model(engine: *const DcflEngine, k: size_t, buf: *mut f64, len: size_t) -> DcflStatus {
    guard(|| {
        non_null!(engine, buf);
        let Some(model) = (*engine).inner.cluster_model(k) else {
            return fail(DcflStatus::InvalidArgument, format!("no cluster {k}"));
        };
        if model.values.len() != len {
            return fail(
                DcflStatus::InvalidArgument,
                format!("buffer holds {len} values, model has {}", model.values.len()),
            );
        }
        slice::from_raw_parts_mut(buf, len).copy_from_slice(&model.values);
        DcflStatus::Ok
    })
}

/// Distance between two vectors of length `len` under a `DCFL_METRIC_*`.
///
/// # Safety
/// `a` and `b` must point to `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dcfl_distance(a: *const f64, b: *const f64, len: size_t, metric: u32, out: *mut f64) -> DcflStatus {
    guard(|| {
        non_null!(a, b, out);
        let m = try_status!(metric_of(metric));
        let d = try_status!(m
            .eval(slice::from_raw_parts(a, len), slice::from_raw_parts(b, len))
            .map_err(from_error));
        *out = d;
        DcflStatus::Ok
    })
}

/// Normalized label histogram of `n` labels into `out` (`num_labels`
/// doubles). An empty input gives all zeros.
///
/// # Safety
/// `labels` must point to `n` values (may be NULL when `n` is 0); `out`
/// must point to `num_labels` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dcfl_label_histogram(labels: *const u32, n: size_t, num_labels: size_t, out: *mut f64) -> DcflStatus {
    guard(|| {
        non_null!(out);
        if labels.is_null() && n > 0 {
            return fail(DcflStatus::NullPointer, "labels is null");
        }
        let raw = if n == 0 { &[][..] } else { slice::from_raw_parts(labels, n) };
        let samples: Vec<Sample> = raw.iter().map(|&l| Sample::new(Vec::new(), l)).collect();
        let h = try_status!(compute_label_histogram(&samples, num_labels).map_err(from_error));
        slice::from_raw_parts_mut(out, num_labels).copy_from_slice(&h.probs);
        DcflStatus::Ok
    })
}

/// Silhouette-selected k-means over `n` row-major points of `dim` values.
/// Writes one cluster label per point and the chosen K.
///
/// # Safety
/// `points` must hold `n * dim` doubles, `labels_out` `n` writable slots.
#[allow(clippy::too_many_arguments)]
#[no_mangle]
pub unsafe extern "C" fn dcfl_choose_k(
    points: *const f64,
    n: size_t,
    dim: size_t,
    metric: u32,
    k_min: size_t,
    k_max: size_t,
    seed: u64,
    labels_out: *mut size_t,
    k_out: *mut size_t,
) -> DcflStatus {
    guard(|| {
        non_null!(points, labels_out, k_out);
        if dim == 0 || n == 0 {
            return fail(DcflStatus::InvalidArgument, "n and dim must be positive");
        }
        let m = try_status!(metric_of(metric));
        let flat = slice::from_raw_parts(points, n * dim);
        let rows: Vec<&[f64]> = flat.chunks(dim).collect();
        let ids: Vec<ClientId> = (0..n as ClientId).collect();
        let a = try_status!(choose_k(&ids, &rows, m, k_min, k_max, seed).map_err(from_error));
        // Client ids are 0..n, so the assignment is already in point order.
        slice::from_raw_parts_mut(labels_out, n).copy_from_slice(&a.labels);
        *k_out = a.k();
        DcflStatus::Ok
    })
}

/// Runs the convergence checks. `params_toml` may be NULL for defaults.
/// The JSON report is written to `*report_json` whenever the checks ran,
/// including when they fail with `TheoryFailed`.
///
/// # Safety
/// `params_toml` must be NULL or NUL-terminated; `report_json` writable.
#[no_mangle]
pub unsafe extern "C" fn dcfl_verify_theory(params_toml: *const c_char, report_json: *mut *mut c_char) -> DcflStatus {
    guard(|| {
        non_null!(report_json);
        let cfg = if params_toml.is_null() {
            TheoryConfig::default()
        } else {
            let text = try_status!(read_str(params_toml, "params_toml"));
            try_status!(toml::from_str::<TheoryConfig>(text).map_err(|e| fail(DcflStatus::Validation, e.to_string())))
        };
        let report = try_status!(verify_theory(&cfg).map_err(from_error));
        let json = try_status!(serde_json::to_string(&report).map_err(|e| fail(DcflStatus::Runtime, e.to_string())));
        *report_json = try_status!(CString::new(json).map_err(|e| fail(DcflStatus::Runtime, e.to_string()))).into_raw();
        if report.passed {
            DcflStatus::Ok
        } else {
            fail(DcflStatus::TheoryFailed, "at least one bound was violated")
        }
    })
}
