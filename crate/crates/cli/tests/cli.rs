use std::path::Path;
use std::process::{Command, Output};

use hpt_cli::commands::{SearchPayload, TrainPayload, TRIAL_STORE_FILE};
use hpt_cli::config::ExperimentConfig;
use hpt_cli::report::ReportEnvelope;
use serde_json::Value;

fn hpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hpt")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn scale_at_identity_succeeds_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scale");
    let o = hpt(&["scale", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["command"], "scale");
    assert!(r["failures"].as_array().unwrap().is_empty());
    let cfg: ExperimentConfig = serde_json::from_value(r["config"].clone()).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    assert_eq!(r["config_hash"], cfg.hash());
    assert_eq!(r["payload"]["rows"].as_array().unwrap().len(), 16);
    let csv = std::fs::read_to_string(out.join("scale.csv")).unwrap();
    assert_eq!(csv.lines().count(), 17);
}

#[test]
fn malformed_config_exits_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[train]\nsteps = 10\nbatch = 3\n").unwrap();
    let o = hpt(&["scale", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("batch"), "{err}");

    std::fs::write(&path, "[model]\nvocab = 32\n").unwrap();
    let o = hpt(&["scale", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "vocab mismatch between model and corpus");
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("file");
    std::fs::write(&file, "x").unwrap();
    let o = hpt(&["scale", "--out", file.join("sub").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn search_target_sets_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dir.path().join("ok");
    let o = hpt(&["search", "--mode", "trust_region", "--objective", "synthetic:sphere", "--budget", "500", "--target", "1e-2", "--out", ok.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: ReportEnvelope<SearchPayload> = ReportEnvelope::from_json(&std::fs::read_to_string(ok.join("report.json")).unwrap()).unwrap();
    assert!(r.payload.best_loss.unwrap() < 1e-2);
    assert_eq!(r.payload.trials, 500);
    assert_eq!(std::fs::read_to_string(ok.join("progress.csv")).unwrap().lines().count(), 501);

    let short = dir.path().join("short");
    let o = hpt(&["search", "--budget", "10", "--target", "1e-9", "--out", short.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert_eq!(report(&short)["failures"].as_array().unwrap().len(), 1);

    let o = hpt(&["search", "--objective", "synthetic:nope", "--out", short.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn resume_drops_a_torn_record_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let args = |budget: &'static str| ["search", "--budget", budget, "--concurrency", "1", "--out", out.to_str().unwrap()];
    assert_eq!(code(&hpt(&args("40"))), 0);
    let store = out.join(TRIAL_STORE_FILE);
    let mut bytes = std::fs::read(&store).unwrap();
    bytes.extend_from_slice(b"{\"trial_id\":40,\"poi");
    std::fs::write(&store, bytes).unwrap();

    let mut resume = args("60").to_vec();
    resume.push("--resume");
    assert_eq!(code(&hpt(&resume)), 0);
    let r: ReportEnvelope<SearchPayload> = ReportEnvelope::from_json(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r.payload.resumed_trials, 40);
    assert_eq!(r.payload.store_warnings.len(), 1);
    assert_eq!(r.payload.trials, 60);

    let fresh = dir.path().join("fresh");
    assert_eq!(code(&hpt(&["search", "--budget", "60", "--concurrency", "1", "--out", fresh.to_str().unwrap()])), 0);
    assert_eq!(std::fs::read(store).unwrap(), std::fs::read(fresh.join(TRIAL_STORE_FILE)).unwrap());
}

#[test]
fn echoed_config_reproduces_a_training_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(&cfg_path, "[model]\nwidth = 32\nbase_width = 32\n[train]\nsteps = 12\nwarmup_steps = 2\neval_sequences = 4\n").unwrap();
    let first = dir.path().join("first");
    let o = hpt(&["train", "--config", cfg_path.to_str().unwrap(), "--seed", "5", "--out", first.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let echoed = report(&first)["config"].clone();
    let json_path = dir.path().join("echo.json");
    std::fs::write(&json_path, serde_json::to_string(&echoed).unwrap()).unwrap();
    let second = dir.path().join("second");
    assert_eq!(code(&hpt(&["train", "--config", json_path.to_str().unwrap(), "--out", second.to_str().unwrap()])), 0);

    let load = |d: &Path| -> ReportEnvelope<TrainPayload> { ReportEnvelope::from_json(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap() };
    let (a, b) = (load(&first), load(&second));
    assert_eq!(a.config_hash, b.config_hash);
    assert_eq!(a.seeds, vec![5, 5]);
    assert_eq!(a.payload.report, b.payload.report);
    assert_eq!(a.payload.report.curve.len(), 12);
    assert_eq!(std::fs::read(first.join("model.ckpt")).unwrap(), std::fs::read(second.join("model.ckpt")).unwrap());
}

#[test]
fn schedule_enum_reports_both_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e");
    let o = hpt(&["schedule-enum", "--intervals", "3", "--k-max", "2", "--list", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let r = report(&out);
    assert_eq!(r["payload"]["count"], 10);
    assert!(r["payload"]["reference_count"].is_null());
    assert_eq!(r["payload"]["schedules"].as_array().unwrap().len(), 10);
    assert_eq!(r["payload"]["schedules"][0], serde_json::json!([0, 0, 0]));
    assert_eq!(std::fs::read_to_string(out.join("schedules.csv")).unwrap().lines().count(), 11);
}
