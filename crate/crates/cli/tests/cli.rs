use std::path::Path;
use std::process::{Command, Output};

fn entrolab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entrolab")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn closed_form_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = entrolab(&["closed-form", "--out", path(dir.path()), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("kind,criterion,check,value,bound,passed"));
    assert!(text.lines().skip(1).all(|l| l.starts_with("closed_form,7,") && l.ends_with("true")));
    assert!(dir.path().join("closed_form.csv").exists());

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("closed_form_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["spec"]["kind"], "closed_form");
    assert_eq!(summary["spec"]["params"]["seed"], 3);
    assert_eq!(summary["passed"], true);
}

#[test]
fn config_file_round_trips_through_print_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = entrolab(&["verify-entropic", "--print-config"]);
    assert!(o.status.success());
    let mut spec: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(spec["kind"], "entropic_order");
    spec["params"]["n"] = 100.into();
    spec["params"]["phi2_coefficient"] = (1.0 / 6.0).into();
    spec["out_dir"] = path(dir.path()).into();
    let cfg = dir.path().join("order.json");
    std::fs::write(&cfg, spec.to_string()).unwrap();

    let o = entrolab(&["verify-entropic", "--config", path(&cfg), "--format", "json"]);
    // Exit code 2 means the run finished but a check failed; at n = 100 the
    // slopes are not yet in their asymptotic regime.
    assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["spec"]["params"]["n"], 100);
    assert!(dir.path().join("entropic_order_summary.json").exists());
}

#[test]
fn report_lists_every_summary() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["closed-form", "orbit-scan"] {
        let o = entrolab(&[cmd, "--out", path(dir.path())]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = entrolab(&["report", "--out", path(dir.path())]);
    assert!(o.status.success());
    let text = stdout(&o);
    let kinds: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(kinds, ["closed_form", "orbit_scan"]);

    let o = entrolab(&["report", "--out", path(dir.path()), "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
}

#[test]
fn mismatched_config_kind_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"kind": "lr_drop", "params": {}}"#).unwrap();
    let o = entrolab(&["align", "--config", path(&cfg)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not belong"));
}

#[test]
fn invalid_params_fail_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"kind": "eos_sweep", "params": {"etas": []}}"#).unwrap();
    let o = entrolab(&["eos-sweep", "--config", path(&cfg), "--out", path(dir.path())]);
    assert!(!o.status.success());
    assert!(!dir.path().join("eos_sweep.csv").exists());
}

#[test]
fn parallelism_flag_reaches_the_sweep() {
    let o = entrolab(&["eos-sweep", "--parallelism", "3", "--print-config"]);
    let spec: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(spec["params"]["parallelism"], 3);
}

#[test]
fn balance_law_selects_the_kind() {
    let o = entrolab(&["balance", "--law", "polynomial", "--print-config"]);
    let spec: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(spec["kind"], "polynomial_balance");
    let o = entrolab(&["sharpness", "--scale-invariant", "--print-config"]);
    let spec: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(spec["kind"], "scale_invariance");
}

#[test]
fn train_writes_trajectory_manifest_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = entrolab(&["train", "--print-config"]);
    let mut job: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    job["train"]["steps"] = 200.into();
    job["train"]["record_every"] = 50.into();
    job["train"]["metrics"]["final_probes"] = 4.into();
    let cfg = dir.path().join("job.json");
    std::fs::write(&cfg, job.to_string()).unwrap();
    let out = dir.path().join("run");

    let o = entrolab(&["train", "--config", path(&cfg), "--out", path(&out), "--seed", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("trajectory.csv").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 9);
    assert_eq!(manifest["steps_completed"], 200);
    let rows = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 5);
}
