use entrolab::experiments::{read_rows_csv, run_experiment, ExperimentParams, ExperimentSpec, Summary};

fn spec(kind: &str, dir: &std::path::Path) -> ExperimentSpec {
    ExperimentSpec::new(ExperimentParams::default_for(kind).unwrap(), dir)
}

#[test]
fn writes_long_csv_and_summary_with_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec("closed_form", dir.path());
    let summary = run_experiment(&s).unwrap();
    assert!(summary.passed);
    assert!(summary.checks.iter().all(|c| c.criterion == 7));

    let rows = read_rows_csv(&s.csv_path()).unwrap();
    assert!(!rows.is_empty());
    let header = std::fs::read_to_string(s.csv_path()).unwrap();
    assert!(header.starts_with("series,x,metric,value\n"));

    let text = std::fs::read_to_string(s.summary_path()).unwrap();
    let back: Summary = serde_json::from_str(&text).unwrap();
    assert_eq!(back.spec, s);
    assert_eq!(back.checks, summary.checks);
}

#[test]
fn rerunning_from_the_summary_reproduces_the_data() {
    let first = tempfile::tempdir().unwrap();
    let s = spec("orbit_scan", first.path());
    run_experiment(&s).unwrap();
    let saved: Summary = serde_json::from_str(&std::fs::read_to_string(s.summary_path()).unwrap()).unwrap();

    let second = tempfile::tempdir().unwrap();
    let mut again = saved.spec.clone();
    again.out_dir = second.path().to_path_buf();
    let rerun = run_experiment(&again).unwrap();
    assert_eq!(rerun.summary, saved.summary);
    assert_eq!(
        std::fs::read(s.csv_path()).unwrap(),
        std::fs::read(again.csv_path()).unwrap()
    );
}

#[test]
fn invalid_parameters_are_rejected_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let bad = [
        r#"{"kind": "eos_sweep", "params": {"phis": [0.0, 0.5]}}"#,
        r#"{"kind": "alignment", "params": {"depth": 1}}"#,
        r#"{"kind": "lr_drop", "params": {"weight_decay": 0.0}}"#,
        r#"{"kind": "entropic_order", "params": {"etas": [0.1]}}"#,
        r#"{"kind": "no_such_kind", "params": {}}"#,
    ];
    for text in bad {
        assert!(ExperimentSpec::from_json(text).is_err(), "{text}");
        if let Ok(params) = serde_json::from_str::<ExperimentParams>(text) {
            let s = ExperimentSpec::new(params, &out);
            assert!(run_experiment(&s).is_err(), "{text}");
        }
    }
    assert!(!out.exists());
    assert!(ExperimentParams::default_for("no_such_kind").is_err());
}

#[test]
fn every_kind_has_defaults_and_criteria() {
    for kind in ExperimentParams::KINDS {
        let p = ExperimentParams::default_for(kind).unwrap();
        assert_eq!(p.kind(), kind);
        p.validate().unwrap();
    }
}

#[test]
fn unknown_parameters_are_rejected() {
    assert!(ExperimentSpec::from_json(r#"{"kind": "balance", "params": {"setps": 10}}"#).is_err());
}

#[test]
fn partial_configs_fill_in_defaults() {
    let s = ExperimentSpec::from_json(r#"{"kind": "balance", "params": {"seed": 9}, "out_dir": "x"}"#).unwrap();
    let ExperimentParams::Balance(p) = &s.params else { panic!("wrong kind") };
    assert_eq!(p.seed, 9);
    assert_eq!(s.params.seed(), 9);
    assert_eq!(s.out_dir, std::path::PathBuf::from("x"));
}
