use std::fs;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_driftcfl");

const TINY: &str = r#"
name = "tiny"
[population]
num_clients = 12
[trace]
num_intervals = 6
[training]
rounds_per_event = 2
total_events = 3
participants_per_round = 4
[output]
checkpoint_every = 2
"#;

fn driftcfl(root: &std::path::Path, args: &[&str]) -> std::process::Output {
    Command::new(BIN)
        .args(args)
        .env("DRIFTCFL_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

#[test]
fn run_then_report_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = driftcfl(dir.path(), &["run", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = dir.path().join("tiny");
    assert!(run_dir.join("summary.json").exists());

    let out = driftcfl(dir.path(), &["report", run_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("round,sim_time_s,mean_accuracy"));
    assert_eq!(text.lines().count(), 1 + 6);
    assert!(run_dir.join("tta.csv").exists());

    let before = fs::read(run_dir.join("rounds.csv")).unwrap();
    let out = driftcfl(dir.path(), &["resume", run_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(run_dir.join("rounds.csv")).unwrap(), before);
}

#[test]
fn invalid_config_exits_with_one_and_names_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[training]\neta = -1.0\nbatch_size = 0\n").unwrap();
    let out = driftcfl(dir.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("training.eta") && err.contains("batch_size"), "{err}");
}

#[test]
fn unknown_axis_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = driftcfl(dir.path(), &["ablate", cfg.to_str().unwrap(), "--axis", "nope"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn resume_without_run_dir_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = driftcfl(dir.path(), &["resume", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_theory_passes_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = driftcfl(dir.path(), &["verify-theory"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["checks"].as_array().unwrap().len(), 4);
}

#[test]
fn understated_theory_params_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("theory.toml");
    fs::write(&p, "dim = 0\n").unwrap();
    let out = driftcfl(dir.path(), &["verify-theory", "--params", p.to_str().unwrap()]);
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(3));
}

#[test]
fn ablation_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = driftcfl(dir.path(), &["ablate", cfg.to_str().unwrap(), "--axis", "tau_grid"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("tiny/tau_grid/ablation_tau_grid.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 5);
    assert!(table.lines().skip(1).all(|l| l.split(',').nth(2) == Some("ok")));
}
