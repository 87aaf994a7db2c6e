use std::ffi::{CStr, CString};
use std::ptr;

use driftcfl_ffi::*;

const CONFIG: &str = r#"
seed = 2
[population]
num_clients = 20
[trace]
num_intervals = 6
[training]
rounds_per_event = 2
total_events = 3
participants_per_round = 6
"#;

fn last_error() -> Option<String> {
    let p = dcfl_last_error();
    if p.is_null() {
        return None;
    }
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { dcfl_string_free(p) };
    Some(s)
}

fn new_engine(text: &str) -> *mut DcflEngine {
    let cfg = CString::new(text).unwrap();
    let mut engine = ptr::null_mut();
    let status = unsafe { dcfl_engine_new(cfg.as_ptr(), &mut engine) };
    assert_eq!(status, DcflStatus::Ok, "{:?}", last_error());
    assert!(!engine.is_null());
    engine
}

#[test]
fn engine_lifecycle() {
    let engine = new_engine(CONFIG);
    let mut round = DcflRound::default();
    let mut has = false;
    let mut rows = 0;
    loop {
        assert_eq!(unsafe { dcfl_engine_step_round(engine, &mut round, &mut has) }, DcflStatus::Ok);
        if !has {
            break;
        }
        assert_eq!(round.round, rows);
        assert!((0.0..=1.0).contains(&round.mean_accuracy));
        rows += 1;
    }
    assert_eq!(rows, 6);

    let mut k = 0;
    assert_eq!(unsafe { dcfl_engine_num_clusters(engine, &mut k) }, DcflStatus::Ok);
    assert!(k >= 1);
    let mut c = usize::MAX;
    assert_eq!(unsafe { dcfl_engine_cluster_of(engine, 0, &mut c) }, DcflStatus::Ok);
    assert!(c < k);
    assert_eq!(unsafe { dcfl_engine_cluster_of(engine, 999, &mut c) }, DcflStatus::InvalidArgument);
    assert!(last_error().unwrap().contains("999"));

    let mut dim = 0;
    assert_eq!(unsafe { dcfl_engine_model_dim(engine, &mut dim) }, DcflStatus::Ok);
    let mut buf = vec![f64::NAN; dim];
    assert_eq!(unsafe { dcfl_engine_copy_model(engine, 0, buf.as_mut_ptr(), dim) }, DcflStatus::Ok);
    assert!(buf.iter().all(|v| v.is_finite()));
    assert_eq!(unsafe { dcfl_engine_copy_model(engine, 0, buf.as_mut_ptr(), dim - 1) }, DcflStatus::InvalidArgument);
    assert_eq!(unsafe { dcfl_engine_copy_model(engine, k, buf.as_mut_ptr(), dim) }, DcflStatus::InvalidArgument);

    let mut acc = f64::NAN;
    assert_eq!(unsafe { dcfl_engine_run(engine, &mut acc) }, DcflStatus::Ok);
    assert_eq!(acc, round.mean_accuracy);
    unsafe { dcfl_engine_free(engine) };
}

#[test]
fn same_config_same_results_through_the_abi() {
    let run = || {
        let e = new_engine(CONFIG);
        let mut acc = 0.0;
        assert_eq!(unsafe { dcfl_engine_run(e, &mut acc) }, DcflStatus::Ok);
        unsafe { dcfl_engine_free(e) };
        acc
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn bad_inputs_map_to_status_codes() {
    let mut engine = ptr::null_mut();
    assert_eq!(unsafe { dcfl_engine_new(ptr::null(), &mut engine) }, DcflStatus::NullPointer);
    assert!(engine.is_null());

    let bad = CString::new("[training]\neta = -1.0\n").unwrap();
    assert_eq!(unsafe { dcfl_engine_new(bad.as_ptr(), &mut engine) }, DcflStatus::Validation);
    assert!(last_error().unwrap().contains("training.eta"));

    let ok = CString::new(CONFIG).unwrap();
    assert_eq!(unsafe { dcfl_engine_new(ok.as_ptr(), ptr::null_mut()) }, DcflStatus::NullPointer);

    let mut x = 0.0;
    assert_eq!(unsafe { dcfl_engine_run(ptr::null_mut(), &mut x) }, DcflStatus::NullPointer);
    unsafe { dcfl_engine_free(ptr::null_mut()) };
    unsafe { dcfl_string_free(ptr::null_mut()) };

    // A successful call clears the previous error.
    let a = [1.0, 0.0];
    assert_eq!(unsafe { dcfl_distance(a.as_ptr(), a.as_ptr(), 2, DCFL_METRIC_L1, &mut x) }, DcflStatus::Ok);
    assert!(last_error().is_none());
}

#[test]
fn distance_and_histogram() {
    let p = [0.5, 0.5, 0.0];
    let q = [0.0, 0.5, 0.5];
    let mut d = 0.0;
    assert_eq!(unsafe { dcfl_distance(p.as_ptr(), q.as_ptr(), 3, DCFL_METRIC_L1, &mut d) }, DcflStatus::Ok);
    assert!((d - 1.0).abs() < 1e-12);
    assert_eq!(unsafe { dcfl_distance(p.as_ptr(), q.as_ptr(), 3, DCFL_METRIC_SQUARED_EUCLIDEAN, &mut d) }, DcflStatus::Ok);
    assert!((d - 0.5).abs() < 1e-12);
    assert_eq!(unsafe { dcfl_distance(p.as_ptr(), q.as_ptr(), 3, DCFL_METRIC_JENSEN_SHANNON, &mut d) }, DcflStatus::Ok);
    assert!((d - 0.5f64.sqrt()).abs() < 1e-12, "{d}");
    assert_eq!(unsafe { dcfl_distance(p.as_ptr(), q.as_ptr(), 3, 9, &mut d) }, DcflStatus::InvalidArgument);
    let not_prob = [2.0, 0.0, 0.0];
    assert_eq!(
        unsafe { dcfl_distance(not_prob.as_ptr(), q.as_ptr(), 3, DCFL_METRIC_JENSEN_SHANNON, &mut d) },
        DcflStatus::InvalidArgument
    );

    let labels = [0u32, 2, 2, 3];
    let mut h = [f64::NAN; 4];
    assert_eq!(unsafe { dcfl_label_histogram(labels.as_ptr(), 4, 4, h.as_mut_ptr()) }, DcflStatus::Ok);
    assert_eq!(h, [0.25, 0.0, 0.5, 0.25]);
    assert_eq!(unsafe { dcfl_label_histogram(ptr::null(), 0, 4, h.as_mut_ptr()) }, DcflStatus::Ok);
    assert_eq!(h, [0.0; 4]);
    assert_eq!(unsafe { dcfl_label_histogram(labels.as_ptr(), 4, 3, h.as_mut_ptr()) }, DcflStatus::InvalidArgument);
}

#[test]
fn choose_k_on_two_groups() {
    let pts = [0.0, 0.0, 0.1, 0.0, 0.0, 0.1, 5.0, 5.0, 5.1, 5.0, 5.0, 5.1];
    let mut labels = [usize::MAX; 6];
    let mut k = 0;
    let status = unsafe {
        dcfl_choose_k(pts.as_ptr(), 6, 2, DCFL_METRIC_SQUARED_EUCLIDEAN, 2, 4, 1, labels.as_mut_ptr(), &mut k)
    };
    assert_eq!(status, DcflStatus::Ok);
    assert_eq!(k, 2);
    assert!(labels[..3].iter().all(|&l| l == labels[0]));
    assert!(labels[3..].iter().all(|&l| l == labels[3]));
    assert_ne!(labels[0], labels[3]);

    let status = unsafe {
        dcfl_choose_k(pts.as_ptr(), 6, 2, DCFL_METRIC_L1, 5, 2, 1, labels.as_mut_ptr(), &mut k)
    };
    assert_eq!(status, DcflStatus::Runtime);
}

#[test]
fn theory_report_as_json() {
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { dcfl_verify_theory(ptr::null(), &mut json) }, DcflStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    unsafe { dcfl_string_free(json) };
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["passed"], true);

    let bad = CString::new("dim = 0\n").unwrap();
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { dcfl_verify_theory(bad.as_ptr(), &mut json) }, DcflStatus::Validation);
    assert!(json.is_null());
}

#[test]
fn output_engine_can_be_resumed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CString::new(format!("{CONFIG}[output]\ncheckpoint_every = 2\n")).unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut engine = ptr::null_mut();
    assert_eq!(unsafe { dcfl_engine_new_with_output(cfg.as_ptr(), path.as_ptr(), &mut engine) }, DcflStatus::Ok);
    let mut full = 0.0;
    assert_eq!(unsafe { dcfl_engine_run(engine, &mut full) }, DcflStatus::Ok);
    unsafe { dcfl_engine_free(engine) };

    let mut resumed = ptr::null_mut();
    assert_eq!(unsafe { dcfl_engine_resume(path.as_ptr(), &mut resumed) }, DcflStatus::Ok);
    let mut again = 0.0;
    assert_eq!(unsafe { dcfl_engine_run(resumed, &mut again) }, DcflStatus::Ok);
    unsafe { dcfl_engine_free(resumed) };
    assert_eq!(full.to_bits(), again.to_bits());
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/driftcfl.h")).unwrap();
    for name in [
        "dcfl_last_error",
        "dcfl_string_free",
        "dcfl_engine_new",
        "dcfl_engine_new_with_output",
        "dcfl_engine_resume",
        "dcfl_engine_free",
        "dcfl_engine_step_round",
        "dcfl_engine_run",
        "dcfl_engine_num_clusters",
        "dcfl_engine_cluster_of",
        "dcfl_engine_model_dim",
        "dcfl_engine_copy_model",
        "dcfl_distance",
        "dcfl_label_histogram",
        "dcfl_choose_k",
        "dcfl_verify_theory",
    ] {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct DcflEngine DcflEngine;"));
}
